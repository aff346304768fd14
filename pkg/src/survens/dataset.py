"""Cohort data model, long-format CSV I/O and per-subject survival datasets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DuplicateVisit, LengthMismatch, MalformedRow, MissingOutcome, ValidationError

_TRUE = {"1", "true", "t", "yes", "y", "1.0"}
_FALSE = {"0", "false", "f", "no", "n", "0.0"}


@dataclass(frozen=True)
class Schema:
    """Maps CSV columns to roles.

    ``covariates`` lists every covariate column in model order; an empty
    tuple means "every column without another role". ``categorical`` and
    ``static`` are subsets of the covariates; static covariates never get
    rate-of-change features.
    """

    id: str = "id"
    visit_time: str = "visit_month"
    event_time: str = "event_time"
    event: str = "event"
    covariates: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    static: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        known = {"id", "visit_time", "event_time", "event", "covariates", "categorical", "static"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown schema keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("covariates", "categorical", "static"):
            if k in kw:
                kw[k] = tuple(kw[k] or ())
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "visit_time": self.visit_time,
            "event_time": self.event_time,
            "event": self.event,
            "covariates": list(self.covariates),
            "categorical": list(self.categorical),
            "static": list(self.static),
        }


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    id: str
    visit_times: np.ndarray  # (k,) months, strictly ascending, first == 0
    values: np.ndarray  # (k, p), NaN marks a missing cell
    event_time: float
    event: bool

    def __post_init__(self):
        vt = np.asarray(self.visit_times, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[0] != vt.shape[0]:
            raise MalformedRow(f"subject {self.id}: values shape {vals.shape} does not match visits")
        if vt.shape[0] < 1:
            raise MalformedRow(f"subject {self.id}: no visits")
        if vt[0] != 0.0:
            raise MalformedRow(f"subject {self.id}: first visit must be at time 0, got {vt[0]}")
        if np.any(np.diff(vt) <= 0):
            raise MalformedRow(f"subject {self.id}: visit times not strictly ascending")
        if not (math.isfinite(self.event_time) and self.event_time > 0):
            raise MalformedRow(f"subject {self.id}: event time must be positive")
        if self.event_time < vt[-1]:
            raise MalformedRow(f"subject {self.id}: event time {self.event_time} precedes last visit {vt[-1]}")
        vt.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "visit_times", vt)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "event", bool(self.event))
        object.__setattr__(self, "event_time", float(self.event_time))

    @property
    def n_visits(self) -> int:
        return self.visit_times.shape[0]

    @property
    def baseline(self) -> np.ndarray:
        return self.values[0]


@dataclass(frozen=True, eq=False)
class CohortTable:
    subjects: tuple[SubjectRecord, ...]
    covariate_names: tuple[str, ...]
    categorical_names: tuple[str, ...] = ()
    static_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "categorical_names", tuple(self.categorical_names))
        object.__setattr__(self, "static_names", tuple(self.static_names))
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("subject ids are not unique")
        p = len(self.covariate_names)
        for s in self.subjects:
            if s.values.shape[1] != p:
                raise ValidationError(f"subject {s.id} has {s.values.shape[1]} covariates, expected {p}")
        for name in (*self.categorical_names, *self.static_names):
            if name not in self.covariate_names:
                raise ValidationError(f"{name!r} is flagged but not a covariate")

    def __len__(self):
        return len(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    @property
    def time(self) -> np.ndarray:
        return np.array([s.event_time for s in self.subjects])

    @property
    def event(self) -> np.ndarray:
        return np.array([s.event for s in self.subjects], dtype=bool)

    @property
    def longitudinal_names(self) -> tuple[str, ...]:
        fixed = set(self.static_names) | set(self.categorical_names)
        return tuple(n for n in self.covariate_names if n not in fixed)

    def n_missing(self) -> int:
        return int(sum(np.isnan(s.values).sum() for s in self.subjects))

    def subset(self, ids: Sequence[str]) -> "CohortTable":
        wanted = set(ids)
        return replace(self, subjects=tuple(s for s in self.subjects if s.id in wanted))

    def equals(self, other: "CohortTable", rtol: float = 1e-12) -> bool:
        if (
            self.covariate_names != other.covariate_names
            or set(self.categorical_names) != set(other.categorical_names)
            or set(self.static_names) != set(other.static_names)
            or len(self) != len(other)
        ):
            return False
        for a, b in zip(self.subjects, other.subjects):
            if a.id != b.id or a.event != b.event or a.values.shape != b.values.shape:
                return False
            if not np.isclose(a.event_time, b.event_time, rtol=rtol, atol=0):
                return False
            if not np.allclose(a.visit_times, b.visit_times, rtol=rtol, atol=0):
                return False
            if not np.array_equal(np.isnan(a.values), np.isnan(b.values)):
                return False
            if not np.allclose(a.values, b.values, rtol=rtol, atol=0, equal_nan=True):
                return False
        return True


@dataclass(eq=False)
class SurvivalDataset:
    """One row per subject: covariates plus the (time, event) outcome."""

    x: np.ndarray
    feature_names: list[str]
    time: np.ndarray
    event: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x.reshape(-1, 1)
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event).astype(bool)
        self.feature_names = list(self.feature_names)
        n, p = self.x.shape
        if len(self.feature_names) != p:
            raise LengthMismatch(f"{p} columns but {len(self.feature_names)} feature names")
        if self.time.shape != (n,) or self.event.shape != (n,):
            raise LengthMismatch("x, time and event must have aligned rows")
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        elif len(self.ids) != n:
            raise LengthMismatch("ids must align with rows")
        self.ids = [str(i) for i in self.ids]

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def has_missing(self) -> bool:
        return bool(np.isnan(self.x).any())

    def rows(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return SurvivalDataset(
            self.x[idx], list(self.feature_names), self.time[idx], self.event[idx],
            [self.ids[i] for i in idx],
        )

    def columns(self, names: Sequence[str]) -> "SurvivalDataset":
        pos = {n: i for i, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise ValidationError(f"unknown features: {missing}")
        cols = [pos[n] for n in names]
        return SurvivalDataset(self.x[:, cols], list(names), self.time.copy(), self.event.copy(), list(self.ids))

    def with_x(self, x, feature_names=None) -> "SurvivalDataset":
        return SurvivalDataset(
            x, list(feature_names if feature_names is not None else self.feature_names),
            self.time.copy(), self.event.copy(), list(self.ids),
        )


# -- CSV I/O ---------------------------------------------------------------


def _parse_float(text: str, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise MalformedRow(f"{where}: {text!r} is not numeric") from None
    if math.isnan(v):
        raise MalformedRow(f"{where}: NaN must be written as an empty cell")
    return v


def _parse_event(text: str, where: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise MalformedRow(f"{where}: {text!r} is not a valid event indicator")


def load_cohort(path, schema: Schema | dict | None = None) -> CohortTable:
    """Read a long-format CSV (one row per subject visit) into a CohortTable."""
    if schema is None:
        schema = Schema()
    elif isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise MalformedRow(f"{path}: missing header row")
        roles = (schema.id, schema.visit_time, schema.event_time, schema.event)
        for col in roles:
            if col not in header:
                raise MalformedRow(f"{path}: required column {col!r} not in header")
        covariates = schema.covariates or tuple(c for c in header if c not in roles)
        for col in covariates:
            if col not in header:
                raise MalformedRow(f"{path}: covariate column {col!r} not in header")

        grouped: dict[str, dict] = {}
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if None in row:
                raise MalformedRow(f"{where}: more fields than header columns")
            sid = (row[schema.id] or "").strip()
            if not sid:
                raise MalformedRow(f"{where}: empty subject id")
            vt_text = (row[schema.visit_time] or "").strip()
            if not vt_text:
                raise MalformedRow(f"{where}: empty visit time")
            vt = _parse_float(vt_text, where)
            et_text = (row[schema.event_time] or "").strip()
            ev_text = (row[schema.event] or "").strip()
            if not et_text or not ev_text:
                raise MissingOutcome(f"{where}: event time and event indicator are required")
            et = _parse_float(et_text, where)
            ev = _parse_event(ev_text, where)
            vals = []
            for col in covariates:
                cell = (row[col] or "").strip()
                vals.append(float("nan") if cell == "" else _parse_float(cell, f"{where} [{col}]"))

            rec = grouped.setdefault(sid, {"visits": {}, "outcome": (et, ev)})
            if rec["outcome"] != (et, ev):
                raise MalformedRow(f"{where}: outcome for subject {sid} differs between rows")
            if vt in rec["visits"]:
                raise DuplicateVisit(f"{where}: subject {sid} has two rows at visit time {vt}")
            rec["visits"][vt] = vals

    subjects = []
    for sid, rec in grouped.items():
        times = sorted(rec["visits"])
        values = np.array([rec["visits"][t] for t in times], dtype=float).reshape(len(times), len(covariates))
        et, ev = rec["outcome"]
        subjects.append(SubjectRecord(sid, np.array(times), values, et, ev))
    return CohortTable(subjects, covariates, schema.categorical, schema.static)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def save_cohort(cohort: CohortTable, path, schema: Schema | None = None) -> None:
    """Write a CohortTable as long-format CSV; missing cells become empty strings."""
    schema = schema or Schema()
    header = [schema.id, schema.visit_time, schema.event_time, schema.event, *cohort.covariate_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in cohort.subjects:
            for k in range(s.n_visits):
                w.writerow(
                    [s.id, repr(float(s.visit_times[k])), repr(s.event_time), int(s.event)]
                    + [_fmt(v) for v in s.values[k]]
                )


def schema_for(cohort: CohortTable, base: Schema | None = None) -> Schema:
    base = base or Schema()
    return replace(
        base,
        covariates=cohort.covariate_names,
        categorical=cohort.categorical_names,
        static=cohort.static_names,
    )


def truncate_visits(cohort: CohortTable, max_visits: int) -> CohortTable:
    """Keep each subject's first ``max_visits`` visits; outcomes are untouched."""
    if max_visits < 1:
        raise ValidationError("max_visits must be >= 1")
    subjects = []
    for s in cohort.subjects:
        if s.n_visits <= max_visits:
            subjects.append(s)
        else:
            subjects.append(
                SubjectRecord(s.id, s.visit_times[:max_visits], s.values[:max_visits], s.event_time, s.event)
            )
    return replace(cohort, subjects=tuple(subjects))


# -- wide per-subject CSV (completed design matrices) -------------------------


def save_dataset(ds: SurvivalDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", "event", *ds.feature_names])
        for i in range(ds.n):
            w.writerow([ds.ids[i], repr(float(ds.time[i])), int(ds.event[i])] + [_fmt(v) for v in ds.x[i]])


def load_dataset(path) -> SurvivalDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["id", "time", "event"]:
            raise MalformedRow(f"{path}: expected header starting with id,time,event")
        names = header[3:]
        ids, times, events, rows = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if len(row) != len(header):
                raise MalformedRow(f"{where}: expected {len(header)} fields, got {len(row)}")
            if not row[1].strip() or not row[2].strip():
                raise MissingOutcome(f"{where}: time and event are required")
            ids.append(row[0])
            times.append(_parse_float(row[1], where))
            events.append(_parse_event(row[2], where))
            rows.append([float("nan") if c.strip() == "" else _parse_float(c, where) for c in row[3:]])
    x = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return SurvivalDataset(x, names, np.array(times), np.array(events, dtype=bool), ids)

