"""Scenario design matrices: baseline covariates plus visit-to-visit rates of change."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import CohortTable, SurvivalDataset
from .errors import ValidationError

log = logging.getLogger(__name__)

DELTA01 = "_d01"
DELTA12 = "_d12"


class Scenario(enum.Enum):
    BaselineOnly = "baseline"
    TwoVisits = "2visits"
    ThreeVisits = "3visits"

    @property
    def n_visits(self) -> int:
        return {"baseline": 1, "2visits": 2, "3visits": 3}[self.value]

    @classmethod
    def parse(cls, text) -> "Scenario":
        if isinstance(text, cls):
            return text
        for s in cls:
            if text in (s.value, s.name):
                return s
        raise ValidationError(f"unknown scenario {text!r}; expected one of {[s.value for s in cls]}")


def indicator_name(column: str, level: float) -> str:
    lv = int(level) if float(level).is_integer() else level
    return f"{column}={lv}"


def is_indicator(name: str) -> bool:
    return "=" in name


def _levels(cohort: CohortTable, j: int) -> np.ndarray:
    vals = np.concatenate([s.values[:, j] for s in cohort.subjects])
    return np.unique(vals[~np.isnan(vals)])


def _rate(s, j: int, a: int, b: int, flagged: set) -> float:
    if s.n_visits <= b:
        return np.nan
    dt = s.visit_times[b] - s.visit_times[a]
    if dt <= 0:
        flagged.add(s.id)
        return np.nan
    # NaN propagates when either visit value is missing
    return (s.values[b, j] - s.values[a, j]) / dt


def build_design(cohort: CohortTable, scenario: Scenario | str) -> SurvivalDataset:
    """Per-subject design matrix for a scenario; missing cells stay NaN.

    Baseline block: numeric covariates at visit 0 and a full one-hot set for
    each categorical column. ``TwoVisits`` appends ``(x1 - x0)/(t1 - t0)`` for
    every longitudinal covariate, ``ThreeVisits`` further appends
    ``(x2 - x1)/(t2 - t1)``. Static covariates never get rate features.
    """
    scenario = Scenario.parse(scenario)
    names = list(cohort.covariate_names)
    cats = set(cohort.categorical_names)
    longi = [names.index(n) for n in cohort.longitudinal_names]
    flagged: set[str] = set()

    columns: list[np.ndarray] = []
    feature_names: list[str] = []
    base = np.array([s.baseline for s in cohort.subjects]).reshape(len(cohort), len(names))
    for j, name in enumerate(names):
        if name in cats:
            for level in _levels(cohort, j):
                col = np.where(np.isnan(base[:, j]), np.nan, (base[:, j] == level).astype(float))
                columns.append(col)
                feature_names.append(indicator_name(name, level))
        else:
            columns.append(base[:, j])
            feature_names.append(name)

    intervals = [(0, 1, DELTA01), (1, 2, DELTA12)][: scenario.n_visits - 1]
    for a, b, tag in intervals:
        for j in longi:
            columns.append(np.array([_rate(s, j, a, b, flagged) for s in cohort.subjects]))
            feature_names.append(names[j] + tag)

    if flagged:
        log.warning("zero visit interval for %d subjects; their rate features are missing", len(flagged))
    x = np.column_stack(columns) if columns else np.zeros((len(cohort), 0))
    return SurvivalDataset(x, feature_names, cohort.time, cohort.event, cohort.ids)


def scenario_columns(feature_names, scenario: Scenario | str) -> list[str]:
    """Subset of a 3-visit design's columns that a scenario uses, order preserved."""
    scenario = Scenario.parse(scenario)
    drop = {Scenario.BaselineOnly: (DELTA01, DELTA12), Scenario.TwoVisits: (DELTA12,), Scenario.ThreeVisits: ()}
    tags = drop[scenario]
    return [n for n in feature_names if not any(n.endswith(t) for t in tags)]


@dataclass
class FeatureSpec:
    """Standardization parameters learned on a training split."""

    features: list[str]
    mean: np.ndarray
    sd: np.ndarray
    dropped: list[str] = field(default_factory=list)

    @property
    def base_features(self) -> list[str]:
        return [n for n in self.features if not n.endswith((DELTA01, DELTA12))]

    @property
    def delta01_features(self) -> list[str]:
        return [n for n in self.features if n.endswith(DELTA01)]

    @property
    def delta12_features(self) -> list[str]:
        return [n for n in self.features if n.endswith(DELTA12)]

    def to_json(self) -> dict:
        return {"features": self.features, "mean": self.mean.tolist(), "sd": self.sd.tolist(), "dropped": self.dropped}

    @classmethod
    def from_json(cls, d) -> "FeatureSpec":
        return cls(list(d["features"]), np.asarray(d["mean"], float), np.asarray(d["sd"], float), list(d["dropped"]))


def fit_standardizer(train: SurvivalDataset) -> FeatureSpec:
    """Per-feature mean and sample sd (ddof=1) on training rows.

    One-hot indicator columns pass through unchanged. Numeric columns with
    zero spread are dropped and logged.
    """
    if train.n == 0:
        raise ValidationError("cannot standardize an empty training set")
    if train.has_missing:
        raise ValidationError("standardize after imputation; training data has missing cells")
    keep, means, sds, dropped = [], [], [], []
    for j, name in enumerate(train.feature_names):
        col = train.x[:, j]
        if is_indicator(name):
            if np.all(col == col[0]):
                dropped.append(name)
                continue
            keep.append(name)
            means.append(0.0)
            sds.append(1.0)
            continue
        sd = float(np.std(col, ddof=1)) if train.n > 1 else 0.0
        if not sd > 0:
            dropped.append(name)
            continue
        keep.append(name)
        means.append(float(np.mean(col)))
        sds.append(sd)
    if dropped:
        log.info("dropped constant features: %s", dropped)
    return FeatureSpec(keep, np.array(means), np.array(sds), dropped)


def apply_standardizer(spec: FeatureSpec, ds: SurvivalDataset) -> SurvivalDataset:
    sub = ds.columns(spec.features)
    return sub.with_x((sub.x - spec.mean) / spec.sd)
