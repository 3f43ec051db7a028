"""Per-feature importance as the mean WRAcc of the pooled rules using it."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .miner import RulePool
from .rulecore import Rule

DEFAULT_TOP_K = 10


@dataclass(frozen=True)
class FeatureScore:
    feature: str
    a_w: float
    rule_count: int

    def to_dict(self) -> dict:
        return {"feature": self.feature, "a_w": self.a_w, "rule_count": self.rule_count}


@dataclass(frozen=True)
class ImportanceReport:
    scores: tuple[FeatureScore, ...]
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ordered = sorted(self.scores, key=lambda s: (-s.a_w, s.feature))
        object.__setattr__(self, "scores", tuple(ordered))

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self):
        return iter(self.scores)

    def features(self) -> list[str]:
        return [s.feature for s in self.scores]

    def get(self, feature: str, default: float = 0.0) -> float:
        for s in self.scores:
            if s.feature == feature:
                return s.a_w
        return default

    def as_dict(self) -> dict[str, float]:
        return {s.feature: s.a_w for s in self.scores}

    def to_json(self) -> list[dict]:
        return [s.to_dict() for s in self.scores]

    @classmethod
    def from_json(cls, data: Sequence[dict]) -> "ImportanceReport":
        return cls(tuple(FeatureScore(d["feature"], float(d["a_w"]), int(d["rule_count"]))
                         for d in data))


def score_features(pool: RulePool | Iterable[Rule], feature_names: Sequence[str] | None = None,
                   top_n: int | None = None) -> ImportanceReport:
    """Weighted-average WRAcc of every feature that occurs in a pooled rule.

    ``A_W(f) = sum(wracc of rules containing f) / (number of such rules)``.

    Parameters
    ----------
    pool : RulePool or iterable of Rule
        Threshold-filtered rules. Plain rules must carry stats and need
        ``feature_names``.
    top_n : int, optional
        Aggregate only the first ``top_n`` rules of the pool's total order
        instead of every rule above the threshold.
    """
    if isinstance(pool, RulePool):
        return _score_pool(pool if top_n is None else pool.head(top_n), _selection(top_n))
    if feature_names is None:
        raise ValueError("feature_names are required when scoring plain rules")
    rules = list(pool)
    if top_n is not None:
        rules = sorted(rules, key=Rule.sort_key)[:top_n]
    values = defaultdict(list)
    for r in rules:
        for s in r.selectors:
            values[s].append(r.stats.wracc)
    scores = tuple(FeatureScore(feature_names[f], math.fsum(v) / len(v), len(v))
                   for f, v in values.items())
    return ImportanceReport(scores, {"rules": len(rules), "selection": _selection(top_n)})


def _selection(top_n):
    return "threshold" if top_n is None else f"top-{top_n}"


def _score_pool(pool: RulePool, selection: str) -> ImportanceReport:
    # Sums of the exact integer numerators keep the result independent of rule
    # order; one division per feature produces the float.
    n_feat = len(pool.feature_names)
    sums = np.zeros(n_feat, dtype=np.int64)
    counts = np.zeros(n_feat, dtype=np.int64)
    for j in range(pool.selectors.shape[1]):
        col = pool.selectors[:, j]
        valid = col >= 0
        np.add.at(sums, col[valid], pool.numerators[valid])
        counts += np.bincount(col[valid], minlength=n_feat)
    denom = pool.n_total * pool.n_total
    scores = tuple(FeatureScore(pool.feature_names[f], int(sums[f]) / (int(counts[f]) * denom),
                                int(counts[f]))
                   for f in np.flatnonzero(counts))
    return ImportanceReport(scores, {"pool": pool.manifest(), "selection": selection})


def top_features(report: ImportanceReport, k: int = DEFAULT_TOP_K) -> list[FeatureScore]:
    if k < 0:
        raise ValueError("k must be non-negative")
    return list(report.scores[:k])


@dataclass(frozen=True)
class ComparisonTable:
    """A_W of a fixed feature list across strata; absent features score 0."""

    features: tuple[str, ...]
    columns: tuple[str, ...]
    values: np.ndarray

    def column(self, name: str) -> dict[str, float]:
        j = self.columns.index(name)
        return dict(zip(self.features, self.values[:, j].tolist()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["feature", *self.columns])
        for f, row in zip(self.features, self.values):
            writer.writerow([f, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def to_long(self) -> list[dict]:
        return [{"feature": f, "stratum": c, "a_w": float(self.values[i, j])}
                for i, f in enumerate(self.features) for j, c in enumerate(self.columns)]


def fixed_feature_comparison(reference: ImportanceReport,
                             strata: Sequence[tuple[str, ImportanceReport]],
                             k: int = DEFAULT_TOP_K,
                             reference_name: str = "reference") -> ComparisonTable:
    """Place the reference top-``k`` features in every stratum's report."""
    if len(reference) == 0:
        raise ValueError("reference report is empty")
    names = [name for name, _ in strata]
    if len(set(names)) != len(names) or reference_name in names:
        dupes = sorted({n for n in names if names.count(n) > 1 or n == reference_name})
        raise ValueError(f"duplicate stratum names: {dupes}")
    features = tuple(s.feature for s in top_features(reference, k))
    reports = [reference] + [r for _, r in strata]
    values = np.array([[rep.as_dict().get(f, 0.0) for rep in reports] for f in features],
                      dtype=float).reshape(len(features), len(reports))
    return ComparisonTable(features, (reference_name, *names), values)
