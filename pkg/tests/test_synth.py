import math

import numpy as np
import pytest

from strata_miner import (ConfigError, MinerConfig, PlantedRule, SynthSpec, generate, mine_beam,
                          planted_pair_spec, top_k)
from strata_miner.synth import expected_quality


def test_default_layout():
    spec = SynthSpec(n_patients=50)
    names = spec.feature_names()
    assert len(names) == 210
    assert sum(n.startswith("med_") for n in names) == 128
    t, truth = generate(spec)
    assert t.n_features == 210 and t.n_patients == 50
    assert set(t.strata) == {"gender", "race", "age", "neighborhood", "income", "insurance"}
    assert truth["dataset_fingerprint"] == t.fingerprint()


def test_one_hot_groups_are_exclusive():
    spec = SynthSpec(n_patients=2000, seed=3)
    t, _ = generate(spec)
    x = t.dense()
    for g, cats in spec.groups:
        idx = [t.feature_index(f"{g}={c}") for c in cats]
        assert (x[:, idx].sum(axis=1) == 1).all()


def test_seed_determinism():
    spec = planted_pair_spec(n_patients=3000, seed=11)
    a, _ = generate(spec)
    b, _ = generate(spec)
    c, _ = generate(planted_pair_spec(n_patients=3000, seed=12))
    assert np.array_equal(a.bits, b.bits) and np.array_equal(a.label, b.label)
    assert a.fingerprint() != c.fingerprint()


def test_analytic_expectation_of_planted_pair():
    exp = expected_quality(planted_pair_spec())
    assert math.isclose(exp["base_rate"], 0.145, rel_tol=1e-12)
    assert math.isclose(exp["rules"][0]["expected_wracc"], 0.04095, rel_tol=1e-12)


def test_planted_wracc_monte_carlo():
    # empirical WRAcc of the planted rule averages to the analytic value
    got = []
    for seed in range(10):
        spec = planted_pair_spec(n_patients=20_000, seed=seed)
        t, _ = generate(spec)
        a, b = t.feature_index("dx_depression"), t.feature_index("med_017")
        x, y = t.dense(), t.label_array()
        cov = x[:, a] & x[:, b]
        n, p = cov.sum(), (cov & y).sum()
        got.append(n / t.n_patients * (p / n - t.base_rate))
    se = np.std(got, ddof=1) / math.sqrt(len(got))
    assert abs(np.mean(got) - 0.04095) < 3 * se + 1e-3


def test_base_rate_within_three_standard_errors():
    for seed in range(5):
        spec = planted_pair_spec(n_patients=10_000, seed=seed)
        t, truth = generate(spec)
        p0 = truth["expected"]["base_rate"]
        se = math.sqrt(p0 * (1 - p0) / t.n_patients)
        assert abs(t.base_rate - p0) < 3 * se


def test_null_model_has_no_signal():
    tops = []
    for n in (2_000, 50_000):
        spec = SynthSpec(n_patients=n, background_rate=0.3,
                         planted=(PlantedRule(("dx_depression",), 0.3, 0.3),), seed=1)
        assert expected_quality(spec)["rules"][0]["expected_wracc"] == pytest.approx(0, abs=1e-15)
        t, _ = generate(spec)
        pool = mine_beam(t, MinerConfig(beam_width=50, max_rule_length=2, wracc_threshold=0.0))
        tops.append(pool.wracc[0])
    assert tops[1] < tops[0] / 3


def test_planted_group_category():
    spec = SynthSpec(n_patients=20_000, seed=2,
                     planted=(PlantedRule(("insurance=medicare", "dx_ckd"), 0.7, 0.4),))
    t, truth = generate(spec)
    x = t.dense()
    share = x[:, t.feature_index("insurance=medicare")].mean()
    assert abs(share - 0.4) < 0.02
    exp = truth["expected"]["rules"][0]["expected_wracc"]
    best = top_k(mine_beam(t, MinerConfig(beam_width=100, max_rule_length=2)), 1)[0]
    assert best.describe(t.feature_names).startswith("insurance=medicare AND dx_ckd")
    assert abs(best.stats.wracc - exp) / exp < 0.15


@pytest.mark.parametrize("kwargs, match", [
    (dict(planted=(PlantedRule(("gender=women", "gender=men")),)), "one-hot"),
    (dict(planted=(PlantedRule(("nope",)),)), "nope"),
    (dict(background_rate=0.7, planted=(PlantedRule(("dx_ckd",), 0.6),)), "background"),
    (dict(n_features=100), "n_features"),
    (dict(strata=("shoe_size",)), "shoe_size"),
])
def test_invalid_specs(kwargs, match):
    with pytest.raises(ConfigError, match=match):
        generate(SynthSpec(n_patients=10, **kwargs))


def test_planted_rule_validation():
    with pytest.raises(ConfigError):
        PlantedRule(("a",), prevalence=1.0)
    with pytest.raises(ConfigError):
        PlantedRule(("a", "a"))
