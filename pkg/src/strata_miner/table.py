"""Immutable binary cohort tables stored as packed bit columns.

Each feature is one row of 64-bit words; bit ``i % 64`` of word ``i // 64``
belongs to patient ``i``. Bits past the last patient are always zero, so a
plain popcount over a column equals the number of patients carrying it.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

WORD_BITS = 64


def n_words(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def pack_bits(values) -> np.ndarray:
    """Pack booleans along the last axis into little-endian uint64 words."""
    bools = np.asarray(values, dtype=bool)
    if bools.shape[-1] == 0:
        return np.zeros(bools.shape[:-1] + (0,), dtype=np.uint64)
    packed = np.packbits(bools, axis=-1, bitorder="little")
    pad = (-packed.shape[-1]) % 8
    if pad:
        packed = np.pad(packed, [(0, 0)] * (packed.ndim - 1) + [(0, pad)])
    words = np.ascontiguousarray(packed).view("<u8")
    return words.astype(np.uint64, copy=False)


def unpack_bits(words: np.ndarray, n_bits: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`, truncated to ``n_bits`` booleans."""
    as_bytes = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little", count=n_bits)
    return bits.astype(bool)


def popcount(words: np.ndarray) -> int:
    return int(np.bitwise_count(words).sum())


def all_ones(n_bits: int) -> np.ndarray:
    return pack_bits(np.ones(n_bits, dtype=bool))


@dataclass(frozen=True)
class TagColumn:
    """A per-patient categorical tag (stratum variable)."""

    categories: tuple[str, ...]
    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int32)
        if codes.size and (codes.min() < 0 or codes.max() >= len(self.categories)):
            raise DataError("tag code outside its category list")
        codes.setflags(write=False)
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "codes", codes)

    @classmethod
    def from_values(cls, values: Sequence[str], categories: Sequence[str] | None = None):
        values = [str(v) for v in values]
        if categories is None:
            categories = list(dict.fromkeys(values))
        else:
            categories = list(categories)
            extra = [v for v in dict.fromkeys(values) if v not in categories]
            categories += extra
        lookup = {c: i for i, c in enumerate(categories)}
        return cls(tuple(categories), np.array([lookup[v] for v in values], dtype=np.int32))

    def values(self) -> list[str]:
        return [self.categories[c] for c in self.codes]

    def restrict(self, mask: np.ndarray) -> "TagColumn":
        return TagColumn(self.categories, self.codes[mask])


@dataclass(frozen=True, eq=False)
class CohortTable:
    """Binary feature matrix over patients plus a packed label column.

    Build instances with :meth:`from_dense` or :func:`strata_miner.cohort.build_table`;
    the constructor expects already packed words.
    """

    feature_names: tuple[str, ...]
    bits: np.ndarray
    label: np.ndarray
    n_patients: int
    strata: Mapping[str, TagColumn] = field(default_factory=dict)
    patient_ids: tuple[str, ...] | None = None
    n_positive: int = field(init=False)

    def __post_init__(self):
        names = tuple(self.feature_names)
        bits = np.ascontiguousarray(self.bits, dtype=np.uint64)
        label = np.ascontiguousarray(self.label, dtype=np.uint64)
        words = n_words(self.n_patients)
        if bits.ndim != 2 or bits.shape != (len(names), words):
            raise DataError(
                f"bit matrix shape {bits.shape} does not match "
                f"{len(names)} features x {words} words")
        if label.shape != (words,):
            raise DataError("label column length differs from feature columns")
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names")
        for name, tag in self.strata.items():
            if tag.codes.shape[0] != self.n_patients:
                raise DataError(f"stratum tag {name!r} has wrong length")
        if self.patient_ids is not None and len(self.patient_ids) != self.n_patients:
            raise DataError("patient id count differs from patient count")
        bits.setflags(write=False)
        label.setflags(write=False)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "strata", dict(self.strata))
        object.__setattr__(self, "n_positive", popcount(label))

    @classmethod
    def from_dense(cls, features, label, feature_names=None, strata=None,
                   patient_ids=None) -> "CohortTable":
        """Pack a dense ``(N, F)`` 0/1 matrix and a length-``N`` label vector."""
        x = np.asarray(features)
        if x.ndim != 2:
            raise DataError("feature matrix must be two-dimensional")
        if x.size and not np.isin(x, (0, 1)).all():
            raise DataError("feature matrix must be binary")
        y = np.asarray(label)
        if y.shape != (x.shape[0],):
            raise DataError("label length must equal the number of rows")
        if y.size and not np.isin(y, (0, 1)).all():
            raise DataError("label must be binary")
        if feature_names is None:
            feature_names = [f"f{i}" for i in range(x.shape[1])]
        strata = {k: v if isinstance(v, TagColumn) else TagColumn.from_values(v)
                  for k, v in (strata or {}).items()}
        return cls(tuple(feature_names), pack_bits(x.T.astype(bool)),
                   pack_bits(y.astype(bool)), int(x.shape[0]), strata,
                   None if patient_ids is None else tuple(map(str, patient_ids)))

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def base_rate(self) -> float:
        return self.n_positive / self.n_patients if self.n_patients else 0.0

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown feature {name!r}") from None

    def column(self, index: int) -> np.ndarray:
        return unpack_bits(self.bits[index], self.n_patients)

    def dense(self) -> np.ndarray:
        """Unpacked ``(N, F)`` boolean matrix."""
        if self.n_features == 0:
            return np.zeros((self.n_patients, 0), dtype=bool)
        return unpack_bits(self.bits, self.n_patients).T.copy()

    def label_array(self) -> np.ndarray:
        return unpack_bits(self.label, self.n_patients)

    def column_counts(self) -> np.ndarray:
        """Popcount of every feature column."""
        return np.bitwise_count(self.bits).sum(axis=1, dtype=np.int64)

    def positive_counts(self) -> np.ndarray:
        """Positive patients carrying each feature."""
        return np.bitwise_count(self.bits & self.label).sum(axis=1, dtype=np.int64)

    def constant_mask(self) -> np.ndarray:
        """True for columns that are all-zero or all-one over the table."""
        counts = self.column_counts()
        return (counts == 0) | (counts == self.n_patients)

    def restrict(self, mask) -> "CohortTable":
        """Sub-table of the patients where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_patients,):
            raise DataError("mask length must equal the number of patients")
        dense = self.dense()[mask]
        strata = {k: v.restrict(mask) for k, v in self.strata.items()}
        ids = None
        if self.patient_ids is not None:
            ids = tuple(p for p, keep in zip(self.patient_ids, mask) if keep)
        return CohortTable(self.feature_names, pack_bits(dense.T),
                           pack_bits(self.label_array()[mask]), int(mask.sum()),
                           strata, ids)

    def select_features(self, indices) -> "CohortTable":
        indices = [int(i) for i in indices]
        return CohortTable(tuple(self.feature_names[i] for i in indices),
                           self.bits[indices].reshape(len(indices), -1),
                           self.label, self.n_patients, self.strata, self.patient_ids)

    def drop_constant(self) -> "CohortTable":
        return self.select_features(np.flatnonzero(~self.constant_mask()))

    def with_label(self, label) -> "CohortTable":
        return CohortTable(self.feature_names, self.bits,
                           pack_bits(np.asarray(label, dtype=bool)),
                           self.n_patients, self.strata, self.patient_ids)

    def fingerprint(self) -> str:
        """SHA-256 over feature names, bits and label; stable across runs."""
        h = hashlib.sha256()
        h.update(str(self.n_patients).encode())
        for name in self.feature_names:
            h.update(b"\x00" + name.encode())
        h.update(self.bits.astype("<u8").tobytes())
        h.update(self.label.astype("<u8").tobytes())
        return h.hexdigest()
