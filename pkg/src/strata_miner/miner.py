"""Beam search and exhaustive enumeration of high-WRAcc rules.

Both engines use ordered specialization (see :func:`strata_miner.rulecore.refine`)
so a selector set is produced at most once. The beam engine scores candidates
with the packed-bit kernel; the exhaustive engine walks every combination on
the unpacked boolean matrix and serves as an independent oracle.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import CandidateBudgetExceeded, ConfigError, DataError
from .rulecore import EXPECTED_MODES, Rule, RuleStats, quality, wracc_numerator
from .table import CohortTable

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 5.0e-4
ENGINES = ("beam", "exhaustive")
SEED_MODES = ("all", "random")


@dataclass(frozen=True)
class MinerConfig:
    beam_width: int = 2000
    max_rule_length: int = 3
    wracc_threshold: float = DEFAULT_THRESHOLD
    min_coverage: int = 0
    engine: str = "beam"
    seed_mode: str = "all"
    seed: int | None = None
    candidate_budget: int = 2_000_000
    expected_confidence: str = "prior"

    def __post_init__(self):
        if int(self.beam_width) < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        if int(self.max_rule_length) < 1:
            raise ConfigError(f"max_rule_length must be >= 1, got {self.max_rule_length}")
        if not math.isfinite(self.wracc_threshold):
            raise ConfigError("wracc_threshold must be finite")
        if int(self.min_coverage) < 0:
            raise ConfigError(f"min_coverage must be >= 0, got {self.min_coverage}")
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.seed_mode not in SEED_MODES:
            raise ConfigError(f"seed_mode must be one of {SEED_MODES}, got {self.seed_mode!r}")
        if self.seed_mode == "random" and self.seed is None:
            raise ConfigError("seed_mode 'random' requires an explicit seed")
        if int(self.candidate_budget) < 1:
            raise ConfigError("candidate_budget must be >= 1")
        if self.expected_confidence not in EXPECTED_MODES:
            raise ConfigError(
                f"expected_confidence must be one of {EXPECTED_MODES}, "
                f"got {self.expected_confidence!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _order(selectors: np.ndarray, lengths: np.ndarray, numer: np.ndarray) -> np.ndarray:
    # lexsort: last key is primary. Rows of equal length share padding positions,
    # so comparing padded columns left to right is the lexicographic order.
    keys = [selectors[:, j] for j in range(selectors.shape[1] - 1, -1, -1)]
    keys += [lengths, -numer]
    return np.lexsort(keys)


class RulePool:
    """Deduplicated, totally ordered set of evaluated rules.

    Stored column-wise: ``selectors`` is an ``(R, L)`` int32 matrix padded with
    ``-1``; ``n`` and ``p`` are the subgroup counts. Rules are kept sorted by
    WRAcc descending, then length, then selector indices.
    """

    def __init__(self, selectors, n, p, n_total: int, p_total: int,
                 feature_names: Sequence[str], config: MinerConfig | None = None,
                 fingerprint: str = "", levels: Sequence[dict] = ()):
        sel = np.asarray(selectors, dtype=np.int32)
        if sel.ndim == 1:
            sel = sel.reshape(-1, 1) if sel.size else sel.reshape(0, 1)
        n = np.asarray(n, dtype=np.int64)
        p = np.asarray(p, dtype=np.int64)
        self.n_total = int(n_total)
        self.p_total = int(p_total)
        self.feature_names = tuple(feature_names)
        self.config = config if config is not None else MinerConfig()
        self.fingerprint = fingerprint
        self.levels = [dict(level) for level in levels]
        lengths = (sel >= 0).sum(axis=1)
        numer = wracc_numerator(n, p, self.n_total, self.p_total,
                                self.config.expected_confidence)
        order = _order(sel, lengths, numer)
        self.selectors = sel[order]
        self.n = n[order]
        self.p = p[order]
        self.lengths = lengths[order]
        self.numerators = numer[order]
        for arr in (self.selectors, self.n, self.p, self.lengths, self.numerators):
            arr.setflags(write=False)
        if len(self) > 1:
            same = (self.selectors[1:] == self.selectors[:-1]).all(axis=1)
            if same.any():
                raise ValueError("rule pool contains a duplicate selector set")

    @classmethod
    def from_rules(cls, rules: Iterable[Rule], n_total: int, p_total: int,
                   feature_names: Sequence[str], config: MinerConfig | None = None,
                   **kwargs) -> "RulePool":
        rules = list(rules)
        width = max([len(r) for r in rules] + [1])
        sel = np.full((len(rules), width), -1, dtype=np.int32)
        for i, r in enumerate(rules):
            sel[i, :len(r)] = r.selectors
        return cls(sel, [r.stats.n for r in rules], [r.stats.p for r in rules],
                   n_total, p_total, feature_names, config, **kwargs)

    def __len__(self) -> int:
        return self.selectors.shape[0]

    @property
    def wracc(self) -> np.ndarray:
        return self.numerators / float(self.n_total * self.n_total)

    def rule(self, i: int) -> Rule:
        sel = tuple(int(s) for s in self.selectors[i] if s >= 0)
        stats = quality(self.n[i], self.p[i], self.n_total, self.p_total,
                        self.config.expected_confidence)
        return Rule(sel, stats)

    def __iter__(self):
        return (self.rule(i) for i in range(len(self)))

    def rules(self) -> list[Rule]:
        return list(self)

    def selector_sets(self) -> set[tuple[int, ...]]:
        return {tuple(int(s) for s in row if s >= 0) for row in self.selectors}

    def subset(self, mask) -> "RulePool":
        mask = np.asarray(mask, dtype=bool)
        return RulePool(self.selectors[mask], self.n[mask], self.p[mask],
                        self.n_total, self.p_total, self.feature_names,
                        self.config, self.fingerprint, self.levels)

    def head(self, k: int) -> "RulePool":
        mask = np.zeros(len(self), dtype=bool)
        mask[:max(0, k)] = True
        return self.subset(mask)

    def same_rules(self, other: "RulePool") -> bool:
        """Identical selector sets with identical counts and totals."""
        if len(self) != len(other) or (self.n_total, self.p_total) != (other.n_total, other.p_total):
            return False
        width = max(self.selectors.shape[1], other.selectors.shape[1])
        a = _pad(self.selectors, width)
        b = _pad(other.selectors, width)
        return bool((a == b).all() and (self.n == other.n).all() and (self.p == other.p).all())

    def to_json(self, limit: int | None = None) -> list[dict]:
        count = len(self) if limit is None else min(limit, len(self))
        return [self.rule(i).to_dict(self.feature_names) for i in range(count)]

    def manifest(self) -> dict:
        return {"config": self.config.to_dict(), "dataset_fingerprint": self.fingerprint,
                "n_patients": self.n_total, "n_positive": self.p_total,
                "pool_size": len(self), "levels": self.levels}


def _pad(sel: np.ndarray, width: int) -> np.ndarray:
    if sel.shape[1] == width:
        return sel
    out = np.full((sel.shape[0], width), -1, dtype=sel.dtype)
    out[:, :sel.shape[1]] = sel
    return out


def top_k(pool: RulePool, k: int) -> list[Rule]:
    """First ``k`` rules of the pool under its total order."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return [pool.rule(i) for i in range(min(k, len(pool)))]


def usable_features(table: CohortTable) -> np.ndarray:
    return np.flatnonzero(~table.constant_mask())


def count_candidates(n_usable: int, max_len: int) -> int:
    """Selector sets of length 1..max_len over ``n_usable`` features."""
    return sum(math.comb(n_usable, k) for k in range(1, max_len + 1))


def _check_table(table: CohortTable) -> None:
    if table.n_patients < 1:
        raise DataError("empty cohort")
    if table.n_features < 1:
        raise DataError("no features")


def mine_beam(table: CohortTable, config: MinerConfig, workers: int | None = None) -> RulePool:
    """Level-wise beam search.

    Level 1 scores every usable single-feature rule (or a seeded random subset
    of ``beam_width`` of them). Each later level refines only the top
    ``beam_width`` rules of the previous level. Every scored rule that meets
    the threshold and minimum coverage enters the pool.
    """
    _check_table(table)
    cfg = config
    N, P = table.n_patients, table.n_positive
    W, L = int(cfg.beam_width), int(cfg.max_rule_length)
    usable = usable_features(table).astype(np.int64)
    if cfg.seed_mode == "random" and usable.size > W:
        rng = np.random.default_rng(cfg.seed)
        usable_l1 = np.sort(rng.choice(usable, size=W, replace=False))
    else:
        usable_l1 = usable

    columns = table.bits
    col_pos = columns & table.label

    chunks_sel, chunks_n, chunks_p = [], [], []
    levels = []

    def keep(sel, n, p, numer, level, n_cand, seconds, beam_size):
        ok = ((numer / float(N * N)) >= cfg.wracc_threshold) & (n >= cfg.min_coverage)
        padded = np.full((int(ok.sum()), L), -1, dtype=np.int32)
        padded[:, :sel.shape[1]] = sel[ok]
        chunks_sel.append(padded)
        chunks_n.append(n[ok])
        chunks_p.append(p[ok])
        levels.append({"level": level, "candidates": int(n_cand), "pooled": int(ok.sum()),
                       "beam": int(beam_size), "seconds": round(seconds, 6)})

    t0 = time.perf_counter()
    sel = usable_l1.reshape(-1, 1)
    counts = table.column_counts()
    pos_counts = table.positive_counts()
    n = counts[usable_l1]
    p = pos_counts[usable_l1]
    numer = wracc_numerator(n, p, N, P, cfg.expected_confidence)
    beam_idx = np.argsort(-numer, kind="stable")[:W]
    keep(sel, n, p, numer, 1, sel.shape[0], time.perf_counter() - t0, beam_idx.size)

    beam_sel = sel[beam_idx]
    beam_cov = columns[usable_l1[beam_idx]]
    beam_pos = col_pos[usable_l1[beam_idx]]

    for level in range(2, L + 1):
        t0 = time.perf_counter()
        # Candidates come out in lexicographic order when parents are.
        lex = np.lexsort([beam_sel[:, j] for j in range(beam_sel.shape[1] - 1, -1, -1)])
        beam_sel, beam_cov, beam_pos = beam_sel[lex], beam_cov[lex], beam_pos[lex]
        starts = np.searchsorted(usable, beam_sel[:, -1], side="right")
        n_children = usable.size - starts
        total = int(n_children.sum())
        if total == 0:
            levels.append({"level": level, "candidates": 0, "pooled": 0, "beam": 0,
                           "seconds": round(time.perf_counter() - t0, 6)})
            break
        parent_idx = np.repeat(np.arange(beam_sel.shape[0], dtype=np.int64), n_children)
        offsets = np.arange(total, dtype=np.int64) - np.repeat(
            np.cumsum(n_children) - n_children, n_children)
        feature_idx = usable[np.repeat(starts, n_children) + offsets]
        n, p = _kernels.child_counts(beam_cov, beam_pos, columns, parent_idx,
                                     feature_idx, workers)
        numer = wracc_numerator(n, p, N, P, cfg.expected_confidence)
        sel = np.hstack([beam_sel[parent_idx], feature_idx.reshape(-1, 1).astype(np.int32)])
        if level < L:
            chosen = np.argsort(-numer, kind="stable")[:W]
        else:
            chosen = np.empty(0, dtype=np.int64)
        keep(sel, n, p, numer, level, total, time.perf_counter() - t0, chosen.size)
        if level == L:
            break
        beam_sel = sel[chosen]
        beam_cov = beam_cov[parent_idx[chosen]] & columns[feature_idx[chosen]]
        beam_pos = beam_pos[parent_idx[chosen]] & columns[feature_idx[chosen]]
        log.debug("level %d: %d candidates, beam %d", level, total, chosen.size)

    return RulePool(np.vstack(chunks_sel), np.concatenate(chunks_n),
                    np.concatenate(chunks_p), N, P, table.feature_names, cfg,
                    table.fingerprint(), levels)


def mine_exhaustive(table: CohortTable, config: MinerConfig) -> RulePool:
    """Score every selector set of length ``<= max_rule_length`` exactly once."""
    _check_table(table)
    cfg = config
    L = int(cfg.max_rule_length)
    usable = [int(f) for f in usable_features(table)]
    total = count_candidates(len(usable), L)
    if total > cfg.candidate_budget:
        raise CandidateBudgetExceeded(total, int(cfg.candidate_budget))

    x = table.dense()
    y = table.label_array()
    N, P = table.n_patients, table.n_positive
    rows_sel, rows_n, rows_p = [], [], []
    per_level = [0] * L
    pooled = [0] * L

    def walk(prefix, cov, start):
        for pos in range(start, len(usable)):
            f = usable[pos]
            sub = cov & x[:, f]
            n = int(np.count_nonzero(sub))
            p = int(np.count_nonzero(sub & y))
            sel = prefix + (f,)
            per_level[len(sel) - 1] += 1
            stats = quality(n, p, N, P, cfg.expected_confidence)
            if stats.wracc >= cfg.wracc_threshold and n >= cfg.min_coverage:
                rows_sel.append(sel + (-1,) * (L - len(sel)))
                rows_n.append(n)
                rows_p.append(p)
                pooled[len(sel) - 1] += 1
            if len(sel) < L:
                walk(sel, sub, pos + 1)

    t0 = time.perf_counter()
    walk((), np.ones(N, dtype=bool), 0)
    elapsed = time.perf_counter() - t0
    levels = [{"level": k + 1, "candidates": per_level[k], "pooled": pooled[k],
               "beam": None, "seconds": round(elapsed if k == 0 else 0.0, 6)}
              for k in range(L)]
    sel = np.array(rows_sel, dtype=np.int32).reshape(-1, L)
    return RulePool(sel, rows_n, rows_p, N, P, table.feature_names, cfg,
                    table.fingerprint(), levels)


def mine(table: CohortTable, config: MinerConfig, workers: int | None = None) -> RulePool:
    if config.engine == "exhaustive":
        return mine_exhaustive(table, config)
    return mine_beam(table, config, workers)


def truncate_length(pool: RulePool, max_len: int) -> RulePool:
    """Pool restricted to rules of at most ``max_len`` selectors.

    Beam levels do not depend on the maximum length, so this equals mining
    the same table with ``max_rule_length=max_len`` and the same width.
    """
    config = MinerConfig(**{**pool.config.to_dict(), "max_rule_length": max_len})
    mask = pool.lengths <= max_len
    levels = [lv for lv in pool.levels if lv["level"] <= max_len]
    if levels and levels[-1]["level"] == max_len:
        levels[-1] = {**levels[-1], "beam": 0}
    return RulePool(pool.selectors[mask][:, :max_len], pool.n[mask], pool.p[mask],
                    pool.n_total, pool.p_total, pool.feature_names, config,
                    pool.fingerprint, levels)
