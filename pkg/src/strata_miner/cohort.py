"""Visit-level records to a labelled, one-hot encoded patient cohort.

The pipeline is driven by a declarative schema (JSON)::

    {
      "bmi_variable": "bmi",
      "variables": {
        "systolic": {"kind": "numeric", "edges": [98, 166],
                     "labels": ["low", "normal", "high"],
                     "edge_side": ["lower", "upper"]},
        "gender":   {"kind": "categorical", "categories": ["women", "men"]},
        "dx_depression": {"kind": "flag"}
      },
      "strata": ["gender"],
      "groups": {"antidepressants": ["med_ssri", "med_snri"]}
    }

``edge_side`` says which bin an edge value falls into: ``"lower"`` makes the
edge inclusive for the bin below (``<= 98`` is low), ``"upper"`` for the bin
above (``>= 166`` is high). Numeric and categorical variables become one
column per label plus ``<var>=unavailable``; flags become a single column.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .table import CohortTable, TagColumn, pack_bits

UNAVAILABLE = "unavailable"
TWO_YEARS_DAYS = 730
KINDS = ("numeric", "categorical", "flag")
_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


@dataclass(frozen=True)
class NumericBins:
    edges: tuple[float, ...]
    labels: tuple[str, ...]
    edge_side: tuple[str, ...]

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        side = self.edge_side
        if isinstance(side, str):
            side = (side,) * len(edges)
        side = tuple(side)
        if any(not math.isfinite(e) for e in edges):
            raise SchemaError("bin edges must be finite")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise SchemaError(f"bin edges must be strictly increasing: {list(edges)}")
        if len(self.labels) != len(edges) + 1:
            raise SchemaError(
                f"{len(edges)} edges need {len(edges) + 1} labels, got {len(self.labels)}")
        if len(side) != len(edges) or any(s not in ("lower", "upper") for s in side):
            raise SchemaError("edge_side entries must be 'lower' or 'upper', one per edge")
        if len(set(self.labels)) != len(self.labels) or UNAVAILABLE in self.labels:
            raise SchemaError(f"bin labels must be unique and not {UNAVAILABLE!r}")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "edge_side", side)

    def index(self, value: float) -> int:
        i = 0
        for edge, side in zip(self.edges, self.edge_side):
            if value > edge or (side == "upper" and value == edge):
                i += 1
        return i


# CDC adult weight classes; every edge opens the class above it.
BMI_BINS = NumericBins((18.5, 25.0, 30.0, 35.0, 40.0),
                       ("underweight", "normal", "overweight", "obese1", "obese2", "obese3"),
                       "upper")


def discretize(value, bins: NumericBins) -> str:
    """Label of the bin holding ``value``; missing or non-finite gives ``unavailable``."""
    if value is None:
        return UNAVAILABLE
    try:
        value = float(value)
    except (TypeError, ValueError):
        return UNAVAILABLE
    if not math.isfinite(value):
        return UNAVAILABLE
    return bins.labels[bins.index(value)]


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    bins: NumericBins | None = None
    categories: tuple[str, ...] = ()

    def labels(self) -> tuple[str, ...]:
        if self.kind == "numeric":
            return self.bins.labels + (UNAVAILABLE,)
        if self.kind == "categorical":
            return self.categories + (UNAVAILABLE,)
        return ()

    def columns(self) -> list[str]:
        if self.kind == "flag":
            return [self.name]
        return [f"{self.name}={label}" for label in self.labels()]


@dataclass(frozen=True)
class SchemaConfig:
    variables: tuple[VariableSpec, ...]
    bmi_variable: str = "bmi"
    strata: tuple[str, ...] = ()
    groups: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate variable names in schema")
        for name in names:
            if name == self.bmi_variable or "bmi" in name.lower():
                raise SchemaError(
                    f"variable {name!r} is BMI-derived; BMI may only be the label source")
        by_name = {v.name: v for v in self.variables}
        for s in self.strata:
            if s not in by_name:
                raise SchemaError(f"stratum variable {s!r} is not in the schema")
            if by_name[s].kind == "flag":
                raise SchemaError(f"stratum variable {s!r} must be numeric or categorical")
        columns = set(self.feature_columns())
        seen = set()
        for gname, members in self.groups.items():
            if not members:
                raise SchemaError(f"group {gname!r} has no members")
            for m in members:
                if m not in columns:
                    raise SchemaError(f"group {gname!r} refers to unknown column {m!r}")
                if m in seen:
                    raise SchemaError(f"column {m!r} belongs to more than one group")
                seen.add(m)
            if gname in columns and gname not in members:
                raise SchemaError(f"group name {gname!r} collides with an existing column")
        object.__setattr__(self, "strata", tuple(self.strata))
        object.__setattr__(self, "groups", {k: tuple(v) for k, v in self.groups.items()})

    @property
    def by_name(self) -> dict[str, VariableSpec]:
        return {v.name: v for v in self.variables}

    def feature_columns(self) -> list[str]:
        return [c for v in self.variables for c in v.columns()]

    @classmethod
    def from_dict(cls, data: Mapping) -> "SchemaConfig":
        if not isinstance(data, Mapping) or "variables" not in data:
            raise SchemaError("schema needs a 'variables' object")
        specs = []
        for name, spec in data["variables"].items():
            kind = spec.get("kind")
            if kind not in KINDS:
                raise SchemaError(f"variables.{name}.kind must be one of {KINDS}, got {kind!r}")
            if kind == "numeric":
                try:
                    bins = NumericBins(tuple(spec["edges"]), tuple(spec["labels"]),
                                       spec.get("edge_side", "upper"))
                except KeyError as exc:
                    raise SchemaError(f"variables.{name} is missing {exc.args[0]!r}") from None
                except SchemaError as exc:
                    raise SchemaError(f"variables.{name}: {exc}") from None
                specs.append(VariableSpec(name, kind, bins=bins))
            elif kind == "categorical":
                cats = tuple(str(c) for c in spec.get("categories", ()))
                if not cats or len(set(cats)) != len(cats) or UNAVAILABLE in cats:
                    raise SchemaError(f"variables.{name}.categories must be unique and non-empty")
                specs.append(VariableSpec(name, kind, categories=cats))
            else:
                specs.append(VariableSpec(name, kind))
        return cls(tuple(specs), str(data.get("bmi_variable", "bmi")),
                   tuple(data.get("strata", ())), dict(data.get("groups", {})))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SchemaConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"schema file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise SchemaError(f"schema file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        variables = {}
        for v in self.variables:
            if v.kind == "numeric":
                variables[v.name] = {"kind": v.kind, "edges": list(v.bins.edges),
                                     "labels": list(v.bins.labels),
                                     "edge_side": list(v.bins.edge_side)}
            elif v.kind == "categorical":
                variables[v.name] = {"kind": v.kind, "categories": list(v.categories)}
            else:
                variables[v.name] = {"kind": v.kind}
        return {"bmi_variable": self.bmi_variable, "variables": variables,
                "strata": list(self.strata),
                "groups": {k: list(v) for k, v in self.groups.items()}}


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    visit_date: dt.date
    values: Mapping[str, object]
    line: int | None = None


def _parse_value(spec: VariableSpec | None, raw: str, line: int, column: str):
    raw = raw.strip()
    if spec is None:  # the BMI column
        if raw == "":
            return None
        try:
            value = float(raw)
        except ValueError:
            raise DataError(f"line {line}: column {column!r}: not a number: {raw!r}") from None
        return value if math.isfinite(value) else None
    if spec.kind == "flag":
        low = raw.lower()
        if low in _TRUE:
            return 1
        if low in _FALSE:
            return 0
        raise DataError(f"line {line}: column {column!r}: not a flag value: {raw!r}")
    if raw == "":
        return None
    if spec.kind == "numeric":
        try:
            value = float(raw)
        except ValueError:
            raise DataError(f"line {line}: column {column!r}: not a number: {raw!r}") from None
        return value if math.isfinite(value) else None
    if raw not in spec.categories:
        raise DataError(f"line {line}: column {column!r}: unknown category {raw!r}")
    return raw


def read_visits_csv(path: str | os.PathLike, schema: SchemaConfig) -> list[VisitRecord]:
    """Parse ``patient_id,visit_date,<variables...>``; empty cells are missing."""
    specs = schema.by_name
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"visits file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header[:2] != ["patient_id", "visit_date"]:
            raise DataError(f"{path}: header must start with patient_id,visit_date")
        for col in header[2:]:
            if col != schema.bmi_variable and col not in specs:
                raise DataError(f"{path}: unknown variable {col!r} (not in schema)")
        records = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            pid = row[0].strip()
            if not pid:
                raise DataError(f"line {line}: empty patient_id")
            try:
                date = dt.date.fromisoformat(row[1].strip())
            except ValueError:
                raise DataError(f"line {line}: invalid visit_date {row[1]!r}") from None
            values = {col: _parse_value(specs.get(col), raw, line, col)
                      for col, raw in zip(header[2:], row[2:])}
            records.append(VisitRecord(pid, date, values, line))
    return records


def _visit_key(v: VisitRecord):
    return (v.visit_date, sorted((k, repr(x)) for k, x in v.values.items()))


def ingest_visits(records: Iterable[VisitRecord], schema: SchemaConfig) -> dict[str, list[VisitRecord]]:
    """Group visits per patient and sort each sequence by date.

    Visits sharing a date are ordered by their values, so the result does not
    depend on input order.
    """
    specs = schema.by_name
    grouped: dict[str, list[VisitRecord]] = {}
    for rec in records:
        if not isinstance(rec.visit_date, dt.date):
            raise DataError(f"line {rec.line}: visit_date is not a date")
        for name in rec.values:
            if name != schema.bmi_variable and name not in specs:
                where = f"line {rec.line}: " if rec.line is not None else ""
                raise DataError(f"{where}unknown variable {name!r}")
        grouped.setdefault(rec.patient_id, []).append(rec)
    return {pid: sorted(grouped[pid], key=_visit_key) for pid in sorted(grouped)}


def modal_value(values: Sequence, order: Sequence | None = None):
    """Most frequent value; ties go to the smallest value (or earliest in ``order``)."""
    counts = Counter(values)
    if not counts:
        return None
    best = max(counts.values())
    tied = [v for v, c in counts.items() if c == best]
    if order is not None:
        rank = {v: i for i, v in enumerate(order)}
        return min(tied, key=lambda v: rank[v])
    return min(tied)


@dataclass(frozen=True)
class PatientRow:
    patient_id: str
    features: Mapping[str, int]
    label: int = 0
    strata: Mapping[str, str] = field(default_factory=dict)


def aggregate_patient(visits: Sequence[VisitRecord], schema: SchemaConfig,
                      patient_id: str | None = None) -> PatientRow:
    """Collapse a visit sequence to one row of binary features.

    Numeric and categorical variables take their modal observed value; flags
    are 1 when recorded at any visit.
    """
    if not visits:
        raise DataError("cannot aggregate an empty visit sequence")
    pid = patient_id if patient_id is not None else visits[0].patient_id
    features: dict[str, int] = {}
    strata: dict[str, str] = {}
    for spec in schema.variables:
        observed = [v.values.get(spec.name) for v in visits]
        observed = [x for x in observed if x is not None]
        if spec.kind == "flag":
            features[spec.name] = int(any(int(x) == 1 for x in observed))
            continue
        if spec.kind == "numeric":
            label = discretize(modal_value([float(x) for x in observed]), spec.bins)
        else:
            mode = modal_value(observed, spec.categories)
            label = UNAVAILABLE if mode is None else mode
        for lab in spec.labels():
            features[f"{spec.name}={lab}"] = int(lab == label)
        if spec.name in schema.strata:
            strata[spec.name] = label
    return PatientRow(pid, features, 0, strata)


@dataclass(frozen=True)
class LabelOutcome:
    included: bool
    label: int = 0
    window_start: dt.date | None = None
    window_end: dt.date | None = None
    reason: str = ""


def _crossed(start: float, later: float) -> bool:
    if start < 30:
        return later >= 30
    if start < 35:
        return later >= 35
    if start < 40:
        return later >= 40
    return False


def label_patient(bmis: Iterable[tuple[dt.date, float]],
                  min_gap_days: int = TWO_YEARS_DAYS) -> LabelOutcome:
    """Inclusion and outcome class from a dated BMI sequence.

    A patient needs two or more BMI readings spanning at least ``min_gap_days``.
    They are positive when a reading at least ``min_gap_days`` after the first
    one moves into a higher obesity class (into >= 30 from below 30, from
    [30, 35) to >= 35, from [35, 40) to >= 40). A positive window ends at the
    first such reading; a negative window covers all readings.
    """
    seq = sorted(((d, float(b)) for d, b in bmis if b is not None and math.isfinite(float(b))),
                 key=lambda x: x[0])
    if not seq:
        return LabelOutcome(False, reason="no BMI")
    if len(seq) < 2:
        return LabelOutcome(False, reason="single BMI")
    first_date, first_bmi = seq[0]
    if (seq[-1][0] - first_date).days < min_gap_days:
        return LabelOutcome(False, reason="span")
    for date, bmi in seq[1:]:
        if (date - first_date).days >= min_gap_days and _crossed(first_bmi, bmi):
            return LabelOutcome(True, 1, first_date, date)
    return LabelOutcome(True, 0, first_date, seq[-1][0])


def build_table(rows: Sequence[PatientRow], feature_names: Sequence[str] | None = None,
                strata_categories: Mapping[str, Sequence[str]] | None = None) -> CohortTable:
    """Pack patient rows into a :class:`CohortTable` with a fixed column order."""
    if not rows:
        raise DataError("empty cohort")
    names = list(feature_names) if feature_names is not None else list(rows[0].features)
    expected = set(names)
    x = np.zeros((len(rows), len(names)), dtype=bool)
    for i, row in enumerate(rows):
        if set(row.features) != expected:
            missing = sorted(expected - set(row.features))
            extra = sorted(set(row.features) - expected)
            raise DataError(f"patient {row.patient_id}: inconsistent features "
                            f"(missing {missing[:5]}, unexpected {extra[:5]})")
        x[i] = [bool(row.features[n]) for n in names]
    y = np.array([int(r.label) for r in rows])
    tag_names = list(rows[0].strata)
    strata = {}
    for var in tag_names:
        cats = None if strata_categories is None else strata_categories.get(var)
        strata[var] = TagColumn.from_values([r.strata[var] for r in rows], cats)
    return CohortTable.from_dense(x, y, names, strata, [r.patient_id for r in rows])


def group_columns(table: CohortTable, groups: Mapping[str, Sequence[str]]) -> CohortTable:
    """Replace each group of columns by their bitwise OR.

    The grouped column takes the position of its first member; members are
    removed and every other column is kept bit for bit.
    """
    index = {name: i for i, name in enumerate(table.feature_names)}
    member_of = {}
    for gname, members in groups.items():
        if not members:
            raise ConfigError(f"group {gname!r} has no members")
        for m in members:
            if m not in index:
                raise ConfigError(f"group {gname!r}: unknown column {m!r}")
            if m in member_of:
                raise ConfigError(f"column {m!r} is in groups {member_of[m]!r} and {gname!r}")
            member_of[m] = gname
    names, rows = [], []
    placed = set()
    for i, name in enumerate(table.feature_names):
        gname = member_of.get(name)
        if gname is None:
            if name in groups:
                raise ConfigError(f"group name {name!r} collides with an existing column")
            names.append(name)
            rows.append(table.bits[i])
        elif gname not in placed:
            placed.add(gname)
            names.append(gname)
            rows.append(np.bitwise_or.reduce(table.bits[[index[m] for m in groups[gname]]], axis=0))
    bits = np.vstack(rows) if rows else np.zeros((0, table.bits.shape[1]), dtype=np.uint64)
    return CohortTable(tuple(names), bits, table.label, table.n_patients,
                       table.strata, table.patient_ids)


@dataclass
class PreparedCohort:
    table: CohortTable
    exclusions: list[tuple[str, str]]
    windows: dict[str, LabelOutcome]


def prepare_cohort(records: Iterable[VisitRecord], schema: SchemaConfig) -> PreparedCohort:
    """Label, window, aggregate and pack every patient; apply schema groups."""
    per_patient = ingest_visits(records, schema)
    rows, exclusions, windows = [], [], {}
    for pid, visits in per_patient.items():
        bmis = [(v.visit_date, v.values.get(schema.bmi_variable)) for v in visits]
        outcome = label_patient(bmis)
        if not outcome.included:
            exclusions.append((pid, outcome.reason))
            continue
        if outcome.label == 1:
            visits = [v for v in visits
                      if outcome.window_start <= v.visit_date <= outcome.window_end]
        row = aggregate_patient(visits, schema, pid)
        rows.append(replace(row, label=outcome.label))
        windows[pid] = outcome
    if not rows:
        raise DataError("empty cohort: every patient was excluded")
    categories = {v.name: v.labels() for v in schema.variables if v.name in schema.strata}
    table = build_table(rows, schema.feature_columns(), categories)
    if schema.groups:
        table = group_columns(table, schema.groups)
    return PreparedCohort(table, exclusions, windows)


def write_cohort_csv(table: CohortTable, path: str | os.PathLike) -> None:
    """One row per patient: id, 0/1 features, label, ``stratum:<var>`` tags."""
    x = table.dense().astype(np.int8)
    y = table.label_array().astype(np.int8)
    tags = list(table.strata)
    ids = table.patient_ids or tuple(str(i) for i in range(table.n_patients))
    tag_values = {t: table.strata[t].values() for t in tags}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", *table.feature_names, "label", *(f"stratum:{t}" for t in tags)])
        for i in range(table.n_patients):
            w.writerow([ids[i], *x[i].tolist(), int(y[i]), *(tag_values[t][i] for t in tags)])


def read_cohort_csv(path: str | os.PathLike) -> CohortTable:
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"cohort file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "patient_id" or "label" not in header:
            raise DataError(f"{path}: header must start with patient_id and contain label")
        li = header.index("label")
        names = header[1:li]
        tags = [h.split(":", 1)[1] for h in header[li + 1:] if h.startswith("stratum:")]
        if len(tags) != len(header) - li - 1:
            raise DataError(f"{path}: columns after label must be stratum:<name>")
        ids, rows, labels, tag_vals = [], [], [], {t: [] for t in tags}
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"line {reader.line_num}: expected {len(header)} fields")
            ids.append(row[0])
            rows.append(row[1:li])
            labels.append(row[li])
            for t, v in zip(tags, row[li + 1:]):
                tag_vals[t].append(v)
    try:
        x = np.array(rows, dtype=np.int8).reshape(len(rows), len(names))
        y = np.array(labels, dtype=np.int8)
    except ValueError:
        raise DataError(f"{path}: feature and label cells must be 0 or 1") from None
    if not ids:
        raise DataError("empty cohort")
    return CohortTable.from_dense(x, y, names, {t: tag_vals[t] for t in tags}, ids)


def write_cohort_npz(table: CohortTable, path: str | os.PathLike) -> None:
    payload = {"feature_names": np.array(table.feature_names, dtype=str),
               "bits": table.bits, "label": table.label,
               "n_patients": np.array(table.n_patients),
               "patient_ids": np.array(table.patient_ids or (), dtype=str),
               "strata_names": np.array(list(table.strata), dtype=str)}
    for i, (name, tag) in enumerate(table.strata.items()):
        payload[f"strata_{i}_categories"] = np.array(tag.categories, dtype=str)
        payload[f"strata_{i}_codes"] = tag.codes
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **payload)


def read_cohort_npz(path: str | os.PathLike) -> CohortTable:
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"cohort file not found: {path}") from None
    n = int(data["n_patients"])
    strata = {str(name): TagColumn(tuple(str(c) for c in data[f"strata_{i}_categories"]),
                                   data[f"strata_{i}_codes"])
              for i, name in enumerate(data["strata_names"])}
    ids = tuple(str(p) for p in data["patient_ids"]) or None
    return CohortTable(tuple(str(f) for f in data["feature_names"]), data["bits"],
                       data["label"], n, strata, ids)


def read_cohort(path: str | os.PathLike) -> CohortTable:
    if str(path).endswith(".npz"):
        return read_cohort_npz(path)
    return read_cohort_csv(path)


def write_cohort(table: CohortTable, path: str | os.PathLike) -> None:
    if str(path).endswith(".npz"):
        write_cohort_npz(table, path)
    else:
        write_cohort_csv(table, path)


def reference_schema() -> SchemaConfig:
    """Measurement thresholds and demographic buckets for an adult weight-gain cohort."""
    conditions = ["hypothyroidism", "stroke", "dementia", "anemia", "asthma", "heart_disease",
                  "bph", "ckd", "cancer", "depression", "diabetes", "osteoporosis",
                  "hyperlipidemia", "hypertension", "obesity", "arthritis", "afib", "copd"]
    variables = {
        "gender": {"kind": "categorical", "categories": ["women", "men"]},
        "age": {"kind": "numeric", "edges": [30, 40, 50, 60, 70],
                "labels": ["under30", "30s", "40s", "50s", "60s", "70plus"]},
        "race": {"kind": "categorical",
                 "categories": ["latino", "white", "african_american", "other"]},
        "insurance": {"kind": "categorical",
                      "categories": ["medicare", "medicaid", "commercial", "self_pay"]},
        "neighborhood": {"kind": "categorical",
                         "categories": ["metro", "metro_adjacent", "rural"]},
        "income": {"kind": "categorical", "categories": ["low", "medium", "high"]},
        "provider": {"kind": "categorical", "categories": ["md", "np", "pa", "rn"]},
        "systolic": {"kind": "numeric", "edges": [98, 166],
                     "labels": ["low", "normal", "high"], "edge_side": ["lower", "upper"]},
        "diastolic": {"kind": "numeric", "edges": [58, 100],
                      "labels": ["low", "normal", "high"], "edge_side": ["lower", "upper"]},
        "hba1c": {"kind": "numeric", "edges": [5, 11.7],
                  "labels": ["low", "normal", "high"], "edge_side": ["lower", "upper"]},
        "ldl": {"kind": "numeric", "edges": [44, 189],
                "labels": ["low", "normal", "high"], "edge_side": ["lower", "upper"]},
    }
    for c in conditions:
        variables[f"dx_{c}"] = {"kind": "flag"}
    return SchemaConfig.from_dict({
        "bmi_variable": "bmi", "variables": variables,
        "strata": ["gender", "race", "age", "neighborhood", "income", "insurance"]})
