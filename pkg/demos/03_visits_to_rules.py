"""From raw visit rows to a labelled cohort, then an exhaustive cross-check.

Run: python3 demos/03_visits_to_rules.py
"""
import datetime as dt
import json
import tempfile
from pathlib import Path

import numpy as np

from strata_miner import MinerConfig, mine_beam, mine_exhaustive, top_k
from strata_miner.cohort import (SchemaConfig, discretize, label_patient, prepare_cohort,
                                 read_visits_csv)
from strata_miner.miner import count_candidates, usable_features

schema = SchemaConfig.from_dict({
    "bmi_variable": "bmi",
    "variables": {
        "systolic": {"kind": "numeric", "edges": [98, 166],
                     "labels": ["low", "normal", "high"], "edge_side": ["lower", "upper"]},
        "gender": {"kind": "categorical", "categories": ["women", "men"]},
        "dx_depression": {"kind": "flag"},
        "dx_hypertension": {"kind": "flag"},
        "med_ssri": {"kind": "flag"},
        "med_snri": {"kind": "flag"},
        "med_statin": {"kind": "flag"},
    },
    "strata": ["gender"],
    "groups": {"antidepressants": ["med_ssri", "med_snri"]},
})

# Boundaries: 98 is still low, 166 is already high
print([discretize(v, schema.by_name["systolic"].bins) for v in (98, 99, 165, 166)])

# Labels come from the BMI trajectory alone
d0 = dt.date(2016, 1, 1)
for seq in ([(0, 28), (800, 31)], [(0, 24), (800, 28)], [(0, 29), (400, 31)]):
    out = label_patient([(d0 + dt.timedelta(days=d), b) for d, b in seq])
    print(seq, "->", out.label if out.included else f"excluded ({out.reason})")

# Simulate visit rows: depressed patients on antidepressants gain weight more
rng = np.random.default_rng(1)
rows = ["patient_id,visit_date,bmi,systolic,gender,dx_depression,dx_hypertension,"
        "med_ssri,med_snri,med_statin"]
for i in range(1500):
    dep = rng.random() < 0.25
    ad = dep and rng.random() < 0.6
    htn = rng.random() < 0.3
    gender = rng.choice(["women", "men", ""], p=[0.5, 0.45, 0.05])
    bmi0 = rng.uniform(24, 33)
    gain = rng.normal(2.5 if ad else 0.5, 1.5)
    n_visits = int(rng.integers(2, 6))
    days = np.sort(rng.integers(0, 1400, n_visits))
    days[0] = 0
    for k, d in enumerate(days):
        bmi = bmi0 + gain * d / 1400
        sbp = rng.normal(150 if htn else 120, 15)
        rows.append(",".join(map(str, [
            f"p{i:04d}", d0 + dt.timedelta(days=int(d)), round(bmi, 1), round(sbp),
            gender, int(dep), int(htn), int(ad and rng.random() < 0.7),
            int(ad and rng.random() < 0.4), int(htn and rng.random() < 0.5)])))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "visits.csv"
    path.write_text("\n".join(rows) + "\n")
    records = read_visits_csv(path, schema)

prep = prepare_cohort(records, schema)
table = prep.table
reasons = {}
for _, why in prep.exclusions:
    reasons[why] = reasons.get(why, 0) + 1
print(f"\n{len(records)} visits -> {table.n_patients} patients "
      f"({table.n_positive} positive); excluded: {reasons}")
print("columns:", ", ".join(table.feature_names))

# With about ten usable columns and rules of up to 3 selectors the search space is
# small enough to enumerate, so the beam can be checked against every rule.
L = 3
total = count_candidates(usable_features(table).size, L)
cfg = MinerConfig(beam_width=total, max_rule_length=L)
beam, full = mine_beam(table, cfg), mine_exhaustive(table, cfg)
print(f"\n{total} candidates; saturated beam equals exhaustive: {beam.same_rules(full)}")
narrow = mine_beam(table, MinerConfig(beam_width=3, max_rule_length=L))
print(f"width 3 keeps {len(narrow)} of {len(full)} pooled rules, "
      f"all of them in the exhaustive pool: {narrow.selector_sets() <= full.selector_sets()}")

print("\ntop rules")
for r in top_k(full, 5):
    print(f"  {r.stats.wracc:.4f}  {r.describe(table.feature_names)}")
print(json.dumps(top_k(full, 1)[0].to_dict(table.feature_names), indent=2))
