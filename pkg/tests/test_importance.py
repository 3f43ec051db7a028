import math

import numpy as np
import pytest

from conftest import random_table
from strata_miner import (FeatureScore, ImportanceReport, MinerConfig, Rule, RulePool,
                          fixed_feature_comparison, mine_beam, quality, score_features,
                          top_features)

NAMES = ["a", "b", "c", "d"]


def rule(sel, n, p, N=100, P=30):
    return Rule(sel, quality(n, p, N, P))


def test_mean_of_two_rules():
    rules = [rule((0, 1), 20, 10), rule((0,), 10, 5)]  # wracc 0.04 and 0.02
    rep = score_features(rules, NAMES)
    assert math.isclose(rep.get("a"), 0.03, abs_tol=1e-15)
    assert [s.rule_count for s in rep if s.feature == "a"] == [2]
    assert rep.get("b") == rules[0].stats.wracc
    assert "c" not in rep.features()


def test_pool_and_plain_paths_agree(rng):
    t = random_table(rng, n_rows=1000, n_features=12)
    pool = mine_beam(t, MinerConfig(beam_width=20, max_rule_length=3, wracc_threshold=0.0))
    a = score_features(pool)
    b = score_features(pool.rules(), pool.feature_names)
    assert a.features() == b.features()
    for s in a:
        assert math.isclose(s.a_w, b.get(s.feature), rel_tol=1e-12)


def test_membership_and_range(rng):
    t = random_table(rng, n_rows=1000, n_features=12)
    tau = 2e-3
    pool = mine_beam(t, MinerConfig(beam_width=20, max_rule_length=3, wracc_threshold=tau))
    rep = score_features(pool)
    used = {pool.feature_names[f] for s in pool.selector_sets() for f in s}
    assert set(rep.features()) == used
    p0 = t.base_rate
    assert all(tau <= s.a_w <= p0 * (1 - p0) for s in rep)
    assert sum(s.rule_count for s in rep) == int(pool.lengths.sum())


def test_order_independence(rng):
    rules = [rule((int(i),), int(n), int(p)) for i, (n, p) in
             enumerate([(20, 10), (30, 12), (10, 6), (40, 16)])]
    base = score_features(rules, NAMES)
    for _ in range(10):
        shuffled = [rules[i] for i in rng.permutation(len(rules))]
        assert score_features(shuffled, NAMES) == base


def test_top_n_selection():
    rules = [rule((0, 1), 20, 10), rule((2,), 10, 5), rule((3,), 20, 8)]
    rep = score_features(rules, NAMES, top_n=1)
    assert rep.features() == ["a", "b"]
    pool = RulePool.from_rules(rules, 100, 30, NAMES)
    assert score_features(pool, top_n=1).features() == ["a", "b"]
    assert score_features(pool, top_n=1).provenance["selection"] == "top-1"


def test_empty_pool_gives_empty_report():
    pool = RulePool.from_rules([], 100, 30, NAMES)
    assert len(score_features(pool)) == 0


def test_top_features_ties_by_name():
    rep = ImportanceReport((FeatureScore("B", 0.03, 1), FeatureScore("A", 0.03, 2),
                            FeatureScore("C", 0.01, 1)))
    assert [s.feature for s in top_features(rep, 10)] == ["A", "B", "C"]
    assert top_features(rep, 0) == []
    with pytest.raises(ValueError):
        top_features(rep, -1)


def test_report_json_roundtrip():
    rep = ImportanceReport((FeatureScore("x", 0.01, 3), FeatureScore("y", 0.02, 1)))
    assert ImportanceReport.from_json(rep.to_json()) == rep


def _report(d):
    return ImportanceReport(tuple(FeatureScore(k, v, 1) for k, v in d.items()))


def test_fixed_feature_comparison_zero_for_absent():
    ref = _report({"a": 0.05, "b": 0.04, "c": 0.01})
    table = fixed_feature_comparison(ref, [("s1", _report({"b": 0.02})),
                                           ("s2", ref)], k=2, reference_name="all")
    assert table.features == ("a", "b")
    assert table.columns == ("all", "s1", "s2")
    assert table.column("s1") == {"a": 0.0, "b": 0.02}
    assert table.column("s2") == table.column("all")
    csv_text = table.to_csv().splitlines()
    assert csv_text[0] == "feature,all,s1,s2"
    assert csv_text[1].startswith("a,0.05,0.0,")
    assert len(table.to_long()) == 6


def test_fixed_feature_comparison_edge_cases():
    ref = _report({"a": 0.05})
    only = fixed_feature_comparison(ref, [])
    assert only.columns == ("reference",) and only.values.shape == (1, 1)
    with pytest.raises(ValueError):
        fixed_feature_comparison(ref, [("s", ref), ("s", ref)])
    with pytest.raises(ValueError):
        fixed_feature_comparison(_report({}), [])
