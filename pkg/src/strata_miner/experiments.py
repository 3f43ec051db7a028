"""Experiment grid, confidence-interval aggregation and stratified re-runs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, StrataMinerError
from .importance import (DEFAULT_TOP_K, ComparisonTable, FeatureScore, ImportanceReport,
                         fixed_feature_comparison, score_features)
from .miner import DEFAULT_THRESHOLD, MinerConfig, RulePool, mine_beam, truncate_length
from .table import CohortTable

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (2000, 5000, 10000)
DEFAULT_LENGTHS = (3, 4, 5)
CI_METHOD = "student-t"


@dataclass(frozen=True)
class GridSpec:
    beam_widths: tuple[int, ...] = DEFAULT_WIDTHS
    max_lengths: tuple[int, ...] = DEFAULT_LENGTHS
    wracc_threshold: float = DEFAULT_THRESHOLD
    min_coverage: int = 0
    strata: tuple[str, ...] = ()
    absent: str = "zero"
    confidence: float = 0.95
    top_n: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "beam_widths", tuple(int(w) for w in self.beam_widths))
        object.__setattr__(self, "max_lengths", tuple(int(n) for n in self.max_lengths))
        object.__setattr__(self, "strata", tuple(self.strata))
        if not self.beam_widths or not self.max_lengths:
            raise ConfigError("grid needs at least one beam width and one max length")
        if self.absent not in ("zero", "present"):
            raise ConfigError(f"absent must be 'zero' or 'present', got {self.absent!r}")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must lie in (0, 1)")
        for w, n in self.settings():
            MinerConfig(beam_width=w, max_rule_length=n,
                        wracc_threshold=self.wracc_threshold, min_coverage=self.min_coverage)

    def settings(self) -> list[tuple[int, int]]:
        return [(w, n) for w in self.beam_widths for n in self.max_lengths]

    def miner_config(self, width: int, max_len: int) -> MinerConfig:
        return MinerConfig(beam_width=width, max_rule_length=max_len,
                           wracc_threshold=self.wracc_threshold,
                           min_coverage=self.min_coverage)

    def to_dict(self) -> dict:
        return {"beam_widths": list(self.beam_widths), "max_lengths": list(self.max_lengths),
                "wracc_threshold": self.wracc_threshold, "min_coverage": self.min_coverage,
                "strata": list(self.strata), "absent": self.absent,
                "confidence": self.confidence, "top_n": self.top_n}


def t_interval(values: Sequence[float], confidence: float = 0.95):
    """Mean and two-sided Student-t interval with ``n - 1`` degrees of freedom.

    Returns ``(mean, low, high, defined)``; a single value gives a degenerate
    interval at the mean with ``defined`` false.
    """
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        raise ValueError("no values")
    if max(vals) == min(vals):
        return vals[0], vals[0], vals[0], n > 1
    mean = math.fsum(vals) / n
    if n == 1:
        return mean, mean, mean, False
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1))
    half = float(stats.t.ppf(0.5 + confidence / 2, n - 1)) * sd / math.sqrt(n)
    return mean, mean - half, mean + half, True


@dataclass(frozen=True)
class AggregatedScore:
    feature: str
    mean: float
    ci_low: float
    ci_high: float
    values: tuple[float, ...]
    present: tuple[bool, ...]
    ci_defined: bool = True

    @property
    def n_settings(self) -> int:
        return len(self.values)

    def to_dict(self) -> dict:
        return {"feature": self.feature, "mean": self.mean, "ci_low": self.ci_low,
                "ci_high": self.ci_high, "ci_defined": self.ci_defined,
                "values": list(self.values), "present": list(self.present)}


@dataclass
class SettingResult:
    beam_width: int
    max_rule_length: int
    pool: RulePool
    report: ImportanceReport

    @property
    def name(self) -> str:
        return f"W{self.beam_width}_L{self.max_rule_length}"


@dataclass
class GridResult:
    spec: GridSpec
    settings: list[SettingResult]
    scores: list[AggregatedScore]
    n_patients: int = 0
    n_positive: int = 0
    fingerprint: str = ""

    def report(self) -> ImportanceReport:
        """Mean A_W per feature as an importance report (rule counts summed)."""
        counts = {}
        for s in self.settings:
            for fs in s.report:
                counts[fs.feature] = counts.get(fs.feature, 0) + fs.rule_count
        return ImportanceReport(tuple(FeatureScore(a.feature, a.mean, counts.get(a.feature, 0))
                                      for a in self.scores))

    def to_json(self) -> dict:
        """Aggregated report; deterministic, no wall-clock values."""
        return {
            "ci_method": CI_METHOD,
            "confidence": self.spec.confidence,
            "spec": self.spec.to_dict(),
            "dataset_fingerprint": self.fingerprint,
            "n_patients": self.n_patients,
            "n_positive": self.n_positive,
            "settings": [{"name": s.name, "beam_width": s.beam_width,
                          "max_rule_length": s.max_rule_length,
                          "pool_size": len(s.pool),
                          "levels": [{k: v for k, v in lv.items() if k != "seconds"}
                                     for lv in s.pool.levels]}
                         for s in self.settings],
            "scores": [a.to_dict() for a in self.scores],
        }

    def timings(self) -> dict:
        return {s.name: [lv["seconds"] for lv in s.pool.levels] for s in self.settings}


def aggregate(reports: Sequence[ImportanceReport], absent: str = "zero",
              confidence: float = 0.95) -> list[AggregatedScore]:
    """Mean and t-interval of each feature's A_W across settings.

    With ``absent="zero"`` a feature missing from a setting contributes 0 there;
    with ``"present"`` only the settings where it appears are averaged.
    """
    features = sorted({f for rep in reports for f in rep.features()})
    tables = [rep.as_dict() for rep in reports]
    out = []
    for f in features:
        present = tuple(f in t for t in tables)
        values = tuple(t.get(f, 0.0) for t in tables)
        used = values if absent == "zero" else [v for v, ok in zip(values, present) if ok]
        mean, lo, hi, defined = t_interval(used, confidence)
        out.append(AggregatedScore(f, mean, lo, hi, values, present, defined))
    out.sort(key=lambda a: (-a.mean, a.feature))
    return out


def _tagged(exc: Exception, width: int, max_len: int) -> Exception:
    try:
        return type(exc)(f"setting W={width} L={max_len}: {exc}")
    except TypeError:
        return exc


def run_grid(table: CohortTable, spec: GridSpec = GridSpec(), workers: int | None = None,
             share_levels: bool = True) -> GridResult:
    """Mine and score every (beam width, max length) setting, then aggregate.

    With ``share_levels`` each width is mined once at the largest length and
    shorter settings are read off by truncation; beam levels do not depend on
    the length cap, so the pools are identical to separate runs.
    """
    results = {}
    for width in spec.beam_widths:
        lengths = sorted(set(spec.max_lengths), reverse=True)
        if share_levels:
            try:
                full = mine_beam(table, spec.miner_config(width, lengths[0]), workers)
            except StrataMinerError as exc:
                raise _tagged(exc, width, lengths[0]) from exc
            for n in lengths:
                results[width, n] = full if n == lengths[0] else truncate_length(full, n)
        else:
            for n in lengths:
                try:
                    results[width, n] = mine_beam(table, spec.miner_config(width, n), workers)
                except StrataMinerError as exc:
                    raise _tagged(exc, width, n) from exc
    settings = []
    for w, n in spec.settings():
        pool = results[w, n]
        settings.append(SettingResult(w, n, pool, score_features(pool, top_n=spec.top_n)))
    scores = aggregate([s.report for s in settings], spec.absent, spec.confidence)
    return GridResult(spec, settings, scores, table.n_patients, table.n_positive,
                      table.fingerprint())


@dataclass(frozen=True)
class Stratum:
    variable: str
    category: str
    mask: np.ndarray = field(compare=False, repr=False)
    positives: int = 0
    negatives: int = 0

    @property
    def name(self) -> str:
        return f"{self.variable}={self.category}"

    @property
    def size(self) -> int:
        return self.positives + self.negatives


def stratify(table: CohortTable, variable: str) -> list[Stratum]:
    """One stratum per observed category of a tag variable, in category order."""
    if variable not in table.strata:
        raise ConfigError(
            f"unknown stratum variable {variable!r}; known: {sorted(table.strata)}")
    tag = table.strata[variable]
    y = table.label_array()
    out = []
    for code, category in enumerate(tag.categories):
        mask = tag.codes == code
        if not mask.any():
            continue
        pos = int(np.count_nonzero(y & mask))
        out.append(Stratum(variable, category, mask, pos, int(mask.sum()) - pos))
    return out


def stratum_counts(table: CohortTable, variables: Sequence[str]) -> list[dict]:
    """Positive and negative counts per stratum plus a cohort total row."""
    rows = []
    for var in variables:
        for s in stratify(table, var):
            rows.append({"variable": var, "stratum": s.category,
                         "positives": s.positives, "negatives": s.negatives})
    rows.append({"variable": "total", "stratum": "all",
                 "positives": table.n_positive,
                 "negatives": table.n_patients - table.n_positive})
    return rows


@dataclass
class StratifiedResult:
    reference: GridResult
    strata: list[tuple[Stratum, GridResult]]
    skipped: list[tuple[Stratum, str]]
    comparison: ComparisonTable
    counts: list[dict]

    def stratum_top(self, k: int = DEFAULT_TOP_K) -> dict[str, list[AggregatedScore]]:
        return {s.name: g.scores[:k] for s, g in self.strata}


def run_stratified(table: CohortTable, spec: GridSpec = GridSpec(),
                   variables: Sequence[str] | None = None, workers: int | None = None,
                   top_k: int = DEFAULT_TOP_K) -> StratifiedResult:
    """Grid on the whole cohort and on every stratum, plus the fixed-feature table.

    Each stratum table drops the columns that are constant inside it. Strata
    without positives are skipped and reported.
    """
    variables = list(variables if variables is not None else (spec.strata or table.strata))
    reference = run_grid(table, spec, workers)
    done, skipped = [], []
    for var in variables:
        for s in stratify(table, var):
            if s.positives == 0:
                log.warning("skipping stratum %s: no positive patients", s.name)
                skipped.append((s, "no positives"))
                continue
            sub = table.restrict(s.mask).drop_constant()
            if sub.n_features == 0:
                log.warning("skipping stratum %s: every column is constant", s.name)
                skipped.append((s, "no features"))
                continue
            done.append((s, run_grid(sub, spec, workers)))
    ref_report = reference.report()
    if len(ref_report):
        comparison = fixed_feature_comparison(
            ref_report, [(s.name, g.report()) for s, g in done], k=top_k,
            reference_name="all")
    else:
        comparison = ComparisonTable((), ("all", *(s.name for s, _ in done)),
                                     np.zeros((0, len(done) + 1)))
    return StratifiedResult(reference, done, skipped, comparison,
                            stratum_counts(table, variables))
