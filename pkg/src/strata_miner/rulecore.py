"""Rules as canonical selector conjunctions and their quality measures.

A selector is a feature index asserting ``feature = 1``. A rule is the sorted,
duplicate-free tuple of its selectors; the empty rule covers every patient.

Weighted relative accuracy of a rule covering ``n`` patients of which ``p``
are positive, on a table of ``N`` patients with ``P`` positives::

    support    = n / N
    confidence = p / n            (0 when n == 0)
    p0         = P / N
    wracc      = support * (confidence - p0) = (p*N - n*P) / N**2

The right-hand form is what gets evaluated: one correctly rounded division of
an exact integer numerator, so rules with equal rational WRAcc always compare
equal and ordering by the float agrees with ordering by the exact value.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .table import CohortTable, all_ones, popcount

EXPECTED_MODES = ("prior", "subgroup")


def _check_mode(expected: str) -> None:
    if expected not in EXPECTED_MODES:
        raise ConfigError(f"expected_confidence must be one of {EXPECTED_MODES}, got {expected!r}")


def wracc_numerator(n, p, n_total: int, p_total: int, expected: str = "prior"):
    """Integer numerator ``k`` with ``wracc = k / n_total**2``.

    ``expected="subgroup"`` selects the alternative definition where the expected
    confidence is ``p / N`` instead of the base rate ``P / N``.
    """
    if expected == "prior":
        return p * n_total - n * p_total
    _check_mode(expected)
    return p * (n_total - n)


@dataclass(frozen=True)
class RuleStats:
    n: int
    p: int
    support: float
    confidence: float
    expected_confidence: float
    wracc: float

    def to_dict(self) -> dict:
        return {"n": self.n, "p": self.p, "support": self.support,
                "confidence": self.confidence,
                "expected_confidence": self.expected_confidence,
                "wracc": self.wracc}


def quality(n: int, p: int, n_total: int, p_total: int,
            expected: str = "prior") -> RuleStats:
    """Quality measures for a subgroup of size ``n`` with ``p`` positives."""
    _check_mode(expected)
    n, p, n_total, p_total = int(n), int(p), int(n_total), int(p_total)
    if not 0 <= p <= n <= n_total or not 0 <= p_total <= n_total or n_total <= 0:
        raise ValueError(f"inconsistent counts n={n} p={p} N={n_total} P={p_total}")
    support = n / n_total
    confidence = p / n if n else 0.0
    p0 = p_total / n_total if expected == "prior" else p / n_total
    wracc = wracc_numerator(n, p, n_total, p_total, expected) / (n_total * n_total)
    return RuleStats(n, p, support, confidence, p0, wracc)


@dataclass(frozen=True)
class Rule:
    """Conjunction of ``feature = 1`` selectors.

    Selector order given at construction does not matter; equality and
    hashing only look at the selector set, never at cached stats.
    """

    selectors: tuple[int, ...] = ()
    stats: RuleStats | None = field(default=None, compare=False)

    def __post_init__(self):
        sel = tuple(sorted(int(s) for s in self.selectors))
        if len(set(sel)) != len(sel):
            raise ValueError(f"duplicate selector in {self.selectors}")
        if sel and sel[0] < 0:
            raise ValueError("selector indices must be non-negative")
        object.__setattr__(self, "selectors", sel)

    def __len__(self) -> int:
        return len(self.selectors)

    def with_stats(self, stats: RuleStats) -> "Rule":
        return Rule(self.selectors, stats)

    def sort_key(self):
        """Total order: WRAcc descending, then shorter, then lexicographic."""
        if self.stats is None:
            raise ValueError("rule has not been evaluated")
        return (-self.stats.wracc, len(self.selectors), self.selectors)

    def to_dict(self, feature_names: Sequence[str]) -> dict:
        if self.stats is None:
            raise ValueError("rule has not been evaluated")
        out = {"selectors": [feature_names[i] for i in self.selectors]}
        out.update(self.stats.to_dict())
        return out

    @classmethod
    def from_dict(cls, data: dict, feature_names: Sequence[str]) -> "Rule":
        lookup = {name: i for i, name in enumerate(feature_names)}
        try:
            sel = [lookup[name] for name in data["selectors"]]
        except KeyError as exc:
            raise ConfigError(f"rule refers to unknown feature {exc.args[0]!r}") from None
        stats = RuleStats(int(data["n"]), int(data["p"]), float(data["support"]),
                          float(data["confidence"]), float(data["expected_confidence"]),
                          float(data["wracc"]))
        return cls(tuple(sel), stats)

    def describe(self, feature_names: Sequence[str]) -> str:
        lhs = " AND ".join(feature_names[i] for i in self.selectors) or "TRUE"
        return f"{lhs} -> class=1"


def _check_selectors(rule: Rule, table: CohortTable) -> None:
    if rule.selectors and rule.selectors[-1] >= table.n_features:
        raise IndexError(
            f"selector {rule.selectors[-1]} out of range for {table.n_features} features")


def coverage(rule: Rule, table: CohortTable) -> np.ndarray:
    """Packed bit vector of the patients matching every selector."""
    _check_selectors(rule, table)
    if not rule.selectors:
        return all_ones(table.n_patients)
    return np.bitwise_and.reduce(table.bits[list(rule.selectors)], axis=0)


def evaluate(rule: Rule, table: CohortTable, expected: str = "prior") -> RuleStats:
    cov = coverage(rule, table)
    return quality(popcount(cov), popcount(cov & table.label),
                   table.n_patients, table.n_positive, expected)


def refine(rule: Rule, table: CohortTable, max_len: int) -> list[Rule]:
    """Children of ``rule`` under ordered specialization.

    Only features with a larger index than the rule's last selector are
    appended, so every selector set is generated from exactly one parent.
    Columns constant over the whole table are never appended.
    """
    _check_selectors(rule, table)
    if len(rule) >= max_len:
        return []
    start = rule.selectors[-1] + 1 if rule.selectors else 0
    constant = table.constant_mask()
    return [Rule(rule.selectors + (f,)) for f in range(start, table.n_features)
            if not constant[f]]


def rules_to_json(rules: Iterable[Rule], feature_names: Sequence[str]) -> list[dict]:
    return [r.to_dict(feature_names) for r in rules]
