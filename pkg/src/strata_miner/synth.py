"""Seeded synthetic cohorts with planted rules of known WRAcc."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .table import CohortTable, TagColumn, pack_bits

CONDITIONS = ("hypothyroidism", "stroke", "dementia", "anemia", "asthma", "heart_disease",
              "bph", "ckd", "cancer", "depression", "diabetes", "osteoporosis",
              "hyperlipidemia", "hypertension", "obesity", "arthritis", "afib", "copd")

STRATA_LAYOUT = (
    ("gender", ("women", "men")),
    ("race", ("latino", "white", "african_american", "other", "unavailable")),
    ("age", ("under30", "30s", "40s", "50s", "60s", "70plus")),
    ("neighborhood", ("metro", "metro_adjacent", "rural")),
    ("income", ("low", "medium", "high")),
    ("insurance", ("medicare", "medicaid", "commercial", "self_pay")),
)

OTHER_GROUPS = (
    ("provider", ("md", "np", "pa", "rn")),
    ("systolic", ("low", "normal", "high", "unavailable")),
    ("diastolic", ("low", "normal", "high", "unavailable")),
    ("hba1c", ("low", "normal", "high", "unavailable")),
    ("ldl", ("low", "normal", "high", "unavailable")),
)


@dataclass(frozen=True)
class PlantedRule:
    features: tuple[str, ...]
    positive_rate: float = 0.6
    prevalence: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise ConfigError("planted rule needs at least one feature")
        if len(set(self.features)) != len(self.features):
            raise ConfigError(f"planted rule repeats a feature: {self.features}")
        if not 0 < self.prevalence < 1:
            raise ConfigError("planted prevalence must lie in (0, 1)")
        if not 0 <= self.positive_rate <= 1:
            raise ConfigError("planted positive_rate must lie in [0, 1]")


@dataclass(frozen=True)
class SynthSpec:
    """Layout and rates of a synthetic cohort.

    Columns are, in order: one-hot groups (``<group>=<category>``), 36
    diagnosis flags (``prior_dx_*``, ``dx_*``), ``n_medications`` medication
    flags (``med_000``...), then ``flag_000``... fillers up to ``n_features``.
    Groups listed in ``strata`` also become per-patient stratum tags.
    """

    n_patients: int = 10_000
    n_features: int = 210
    n_medications: int = 128
    background_rate: float = 0.1
    planted: tuple[PlantedRule, ...] = ()
    groups: tuple[tuple[str, tuple[str, ...]], ...] = STRATA_LAYOUT + OTHER_GROUPS
    strata: tuple[str, ...] = tuple(name for name, _ in STRATA_LAYOUT)
    diagnosis_flags: bool = True
    flag_prevalence: tuple[float, float] = (0.05, 0.4)
    medication_prevalence: tuple[float, float] = (0.01, 0.15)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "planted", tuple(
            p if isinstance(p, PlantedRule) else PlantedRule(**p) for p in self.planted))
        object.__setattr__(self, "groups", tuple((g, tuple(c)) for g, c in self.groups))
        object.__setattr__(self, "strata", tuple(self.strata))
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if not 0 <= self.background_rate <= 1:
            raise ConfigError("background_rate must lie in [0, 1]")
        for p in self.planted:
            if not self.background_rate <= p.positive_rate:
                raise ConfigError(
                    f"planted positive_rate {p.positive_rate} is below the background "
                    f"rate {self.background_rate}")
        group_names = [g for g, _ in self.groups]
        for s in self.strata:
            if s not in group_names:
                raise ConfigError(f"stratum {s!r} is not a one-hot group")
        fixed = len(self.group_columns()) + len(self.diagnosis_columns()) + self.n_medications
        if self.n_features < fixed:
            raise ConfigError(
                f"n_features={self.n_features} is smaller than the {fixed} layout columns")

    def group_columns(self) -> list[str]:
        return [f"{g}={c}" for g, cats in self.groups for c in cats]

    def diagnosis_columns(self) -> list[str]:
        if not self.diagnosis_flags:
            return []
        return [f"prior_dx_{c}" for c in CONDITIONS] + [f"dx_{c}" for c in CONDITIONS]

    def feature_names(self) -> list[str]:
        meds = [f"med_{i:03d}" for i in range(self.n_medications)]
        fixed = self.group_columns() + self.diagnosis_columns() + meds
        fill = [f"flag_{i:03d}" for i in range(self.n_features - len(fixed))]
        return fixed + fill

    def to_dict(self) -> dict:
        out = asdict(self)
        out["planted"] = [asdict(p) for p in self.planted]
        return out


def _group_of(spec: SynthSpec) -> dict[str, tuple[str, str]]:
    return {f"{g}={c}": (g, c) for g, cats in spec.groups for c in cats}


def _planted_prevalence(spec: SynthSpec, names: list[str]) -> dict[str, float]:
    """Prevalence fixed by the planted rules for each planted feature."""
    known = set(names)
    group_of = _group_of(spec)
    fixed: dict[str, float] = {}
    for rule in spec.planted:
        groups_used = [group_of[f][0] for f in rule.features if f in group_of]
        if len(groups_used) != len(set(groups_used)):
            raise ConfigError(
                f"planted rule {rule.features} needs two categories of one one-hot group")
        for f in rule.features:
            if f not in known:
                raise ConfigError(f"planted feature {f!r} is not a column")
            if f in fixed and fixed[f] != rule.prevalence:
                raise ConfigError(f"planted feature {f!r} has conflicting prevalences")
            fixed[f] = rule.prevalence
    per_group: dict[str, float] = {}
    for f, a in fixed.items():
        if f in group_of:
            g = group_of[f][0]
            per_group[g] = per_group.get(g, 0.0) + a
    for g, total in per_group.items():
        cats = dict(spec.groups)[g]
        n_planted = sum(1 for f in fixed if f in group_of and group_of[f][0] == g)
        if total > 1 or (total == 1 and n_planted < len(cats)):
            raise ConfigError(f"planted prevalences in group {g!r} cannot be satisfied")
    return fixed


def expected_quality(spec: SynthSpec) -> dict:
    """Population base rate and WRAcc of every planted rule.

    Enumerates the joint states of the variables that planted rules touch;
    these variables are mutually independent by construction.
    """
    names = spec.feature_names()
    fixed = _planted_prevalence(spec, names)
    group_of = _group_of(spec)
    variables: dict[str, list[tuple[frozenset, float]]] = {}
    for f, a in fixed.items():
        var = group_of[f][0] if f in group_of else f
        variables.setdefault(var, [])
    for var in variables:
        if var in dict(spec.groups):
            members = [f for f in fixed if f in group_of and group_of[f][0] == var]
            states = [(frozenset([f]), fixed[f]) for f in members]
            rest = 1.0 - sum(fixed[f] for f in members)
            if rest > 0:
                states.append((frozenset(), rest))
        else:
            states = [(frozenset([var]), fixed[var]), (frozenset(), 1.0 - fixed[var])]
        variables[var] = states

    b = spec.background_rate
    p_rule = [0.0] * len(spec.planted)
    pos_rule = [0.0] * len(spec.planted)
    p0 = 0.0
    for combo in itertools.product(*variables.values()):
        active = frozenset().union(*(s for s, _ in combo)) if combo else frozenset()
        prob = float(np.prod([pr for _, pr in combo])) if combo else 1.0
        matched = [i for i, r in enumerate(spec.planted) if set(r.features) <= active]
        rate = max([spec.planted[i].positive_rate for i in matched], default=b)
        p0 += prob * rate
        for i in matched:
            p_rule[i] += prob
            pos_rule[i] += prob * rate
    rules = []
    for i, r in enumerate(spec.planted):
        conf = pos_rule[i] / p_rule[i] if p_rule[i] else 0.0
        rules.append({"features": list(r.features), "prevalence": r.prevalence,
                      "positive_rate": r.positive_rate, "support": p_rule[i],
                      "confidence": conf, "expected_wracc": p_rule[i] * (conf - p0)})
    return {"base_rate": p0, "rules": rules}


def generate(spec: SynthSpec) -> tuple[CohortTable, dict]:
    """Draw a cohort; returns the table and its ground-truth manifest.

    Draw order is fixed (group category weights, flag prevalences, group
    memberships, flags, labels), so a spec always yields the same table.
    """
    names = spec.feature_names()
    fixed = _planted_prevalence(spec, names)
    rng = np.random.default_rng(spec.seed)
    n = spec.n_patients
    x = np.zeros((n, len(names)), dtype=bool)
    col = {name: i for i, name in enumerate(names)}
    tags = {}

    for g, cats in spec.groups:
        weights = rng.dirichlet(np.full(len(cats), 4.0))
        planted = {c: fixed[f"{g}={c}"] for c in cats if f"{g}={c}" in fixed}
        if planted:
            free = [i for i, c in enumerate(cats) if c not in planted]
            rest = 1.0 - sum(planted.values())
            probs = np.zeros(len(cats))
            if free:
                probs[free] = weights[free] / weights[free].sum() * rest
            for i, c in enumerate(cats):
                if c in planted:
                    probs[i] = planted[c]
            weights = probs / probs.sum()
        codes = rng.choice(len(cats), size=n, p=weights)
        for i, c in enumerate(cats):
            x[:, col[f"{g}={c}"]] = codes == i
        if g in spec.strata:
            tags[g] = TagColumn(cats, codes.astype(np.int32))

    group_cols = set(spec.group_columns())
    flag_names = [f for f in names if f not in group_cols]
    lo_f, hi_f = spec.flag_prevalence
    lo_m, hi_m = spec.medication_prevalence
    prevalence = np.array([rng.uniform(lo_m, hi_m) if f.startswith("med_")
                           else rng.uniform(lo_f, hi_f) for f in flag_names])
    for i, f in enumerate(flag_names):
        if f in fixed:
            prevalence[i] = fixed[f]
    draws = rng.random((n, len(flag_names))) < prevalence
    idx = [col[f] for f in flag_names]
    x[:, idx] = draws

    rate = np.full(n, spec.background_rate)
    for r in spec.planted:
        match = np.all(x[:, [col[f] for f in r.features]], axis=1)
        rate = np.where(match, np.maximum(rate, r.positive_rate), rate)
    y = rng.random(n) < rate

    table = CohortTable.from_dense(x, y, names, tags,
                                   [f"p{i:07d}" for i in range(n)])
    truth = {"spec": spec.to_dict(), "expected": expected_quality(spec),
             "observed_base_rate": table.base_rate,
             "dataset_fingerprint": table.fingerprint()}
    return table, truth


def planted_pair_spec(n_patients: int = 100_000, seed: int = 0, prevalence: float = 0.3,
                      positive_rate: float = 0.6, background_rate: float = 0.1,
                      features: tuple[str, ...] = ("dx_depression", "med_017"),
                      **kwargs) -> SynthSpec:
    """210-column cohort with one planted two-feature rule."""
    return SynthSpec(n_patients=n_patients, background_rate=background_rate,
                     planted=(PlantedRule(features, positive_rate, prevalence),),
                     seed=seed, **kwargs)
