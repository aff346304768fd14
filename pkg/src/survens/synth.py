"""Synthetic longitudinal cohorts with a known proportional-hazards truth.

Each subject has, per longitudinal covariate, a baseline value ``x0 ~ N(0, 1)``
and a per-month slope ``s ~ N(0, slope_sd^2)``; the value observed at visit
time ``t`` is ``x0 + s * t`` plus optional measurement noise. The linear
predictor is ``eta = [x0, static] @ true_beta + s @ slope_beta`` and the event
time is Weibull with survival ``S(t | eta) = exp(-(t / scale)^shape * exp(eta))``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import brentq

from .dataset import CohortTable, Schema, SubjectRecord
from .errors import InvalidConfig

MIN_VISIT_GAP = 0.5  # months; keeps jittered visits strictly ascending


@dataclass
class SynthConfig:
    n_subjects: int = 500
    n_numeric: int = 5
    n_static: int = 0
    n_categorical: int = 0
    n_levels: int = 3
    true_beta: list[float] | None = None  # length n_numeric + n_static; None = zeros
    slope_beta: list[float] | None = None  # length n_numeric; None = zeros
    slope_sd: float = 0.1
    measurement_noise_sd: float = 0.0
    baseline_hazard_scale: float = 60.0
    baseline_hazard_shape: float = 1.5
    censor_rate: float = 0.3
    missing_rate: float = 0.0
    visit_times: list[float] = field(default_factory=lambda: [0.0, 6.0, 12.0])
    visit_jitter_sd: float = 0.0
    age_range: list[float] = field(default_factory=lambda: [61.0, 90.0])
    age_beta: float = 0.0  # per decade, centred on the middle of age_range
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synth keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def beta(self) -> np.ndarray:
        k = self.n_numeric + self.n_static
        return np.zeros(k) if self.true_beta is None else np.asarray(self.true_beta, dtype=float)

    @property
    def slope_coef(self) -> np.ndarray:
        return np.zeros(self.n_numeric) if self.slope_beta is None else np.asarray(self.slope_beta, dtype=float)

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise InvalidConfig("n_subjects must be positive")
        if min(self.n_numeric, self.n_static, self.n_categorical) < 0:
            raise InvalidConfig("covariate counts must be nonnegative")
        if self.n_categorical and self.n_levels < 2:
            raise InvalidConfig("categorical covariates need at least 2 levels")
        if self.beta.shape != (self.n_numeric + self.n_static,):
            raise InvalidConfig(
                f"true_beta needs {self.n_numeric + self.n_static} entries, got {self.beta.shape[0]}"
            )
        if self.slope_coef.shape != (self.n_numeric,):
            raise InvalidConfig(f"slope_beta needs {self.n_numeric} entries, got {self.slope_coef.shape[0]}")
        if self.baseline_hazard_scale <= 0 or self.baseline_hazard_shape <= 0:
            raise InvalidConfig("Weibull scale and shape must be positive")
        if not 0 <= self.censor_rate < 1:
            raise InvalidConfig("censor_rate must lie in [0, 1)")
        if not 0 <= self.missing_rate < 1:
            raise InvalidConfig("missing_rate must lie in [0, 1)")
        if self.slope_sd < 0 or self.measurement_noise_sd < 0 or self.visit_jitter_sd < 0:
            raise InvalidConfig("standard deviations must be nonnegative")
        vt = list(self.visit_times)
        if not vt or vt[0] != 0 or any(b <= a for a, b in zip(vt, vt[1:])):
            raise InvalidConfig("visit_times must start at 0 and increase strictly")
        if len(self.age_range) != 2 or self.age_range[0] >= self.age_range[1]:
            raise InvalidConfig("age_range must be [low, high] with low < high")

    def covariate_names(self) -> tuple[list[str], list[str], list[str]]:
        """(all covariates, categorical, static) in column order."""
        longi = [f"x{j + 1}" for j in range(self.n_numeric)]
        static = [f"s{j + 1}" for j in range(self.n_static)]
        cats = [f"c{j + 1}" for j in range(self.n_categorical)]
        names = longi + static + cats + ["age"]
        return names, cats, static + cats + ["age"]

    def schema(self) -> Schema:
        names, cats, static = self.covariate_names()
        return Schema(covariates=tuple(names), categorical=tuple(cats), static=tuple(static))


@dataclass
class GroundTruth:
    eta: np.ndarray
    true_beta: np.ndarray
    slope_beta: np.ndarray
    baseline: np.ndarray  # (n, n_numeric) noiseless baseline values
    slopes: np.ndarray  # (n, n_numeric) per-month slopes
    event_time: np.ndarray  # latent event times
    censor_time: np.ndarray
    ids: list[str]
    achieved_censoring: float

    def weibull_survival(self, t, cfg: SynthConfig, eta=0.0):
        t = np.asarray(t, dtype=float)
        return np.exp(-((t / cfg.baseline_hazard_scale) ** cfg.baseline_hazard_shape) * np.exp(eta))

    def to_json(self) -> dict:
        return {
            "ids": self.ids,
            "eta": self.eta.tolist(),
            "true_beta": self.true_beta.tolist(),
            "slope_beta": self.slope_beta.tolist(),
            "baseline": self.baseline.tolist(),
            "slopes": self.slopes.tolist(),
            "event_time": self.event_time.tolist(),
            "censor_time": [None if not np.isfinite(c) else c for c in self.censor_time.tolist()],
            "achieved_censoring": self.achieved_censoring,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        return cls(
            eta=np.asarray(d["eta"], dtype=float),
            true_beta=np.asarray(d["true_beta"], dtype=float),
            slope_beta=np.asarray(d["slope_beta"], dtype=float),
            baseline=np.asarray(d["baseline"], dtype=float),
            slopes=np.asarray(d["slopes"], dtype=float),
            event_time=np.asarray(d["event_time"], dtype=float),
            censor_time=np.array([np.inf if c is None else c for c in d["censor_time"]], dtype=float),
            ids=list(d["ids"]),
            achieved_censoring=float(d["achieved_censoring"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)


def _censoring_rate(event_times: np.ndarray, target: float) -> float:
    """Exponential censoring rate whose expected censored fraction is ``target``."""
    f = lambda r: np.mean(1.0 - np.exp(-r * event_times)) - target  # noqa: E731
    hi = 1.0 / np.median(event_times)
    while f(hi) < 0:
        hi *= 2.0
    return brentq(f, 0.0, hi, xtol=1e-14)


def generate(cfg: SynthConfig) -> tuple[CohortTable, GroundTruth]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, k = cfg.n_subjects, cfg.n_numeric

    x0 = rng.standard_normal((n, k))
    slopes = rng.normal(0.0, cfg.slope_sd, (n, k)) if cfg.slope_sd > 0 else np.zeros((n, k))
    static = rng.standard_normal((n, cfg.n_static))
    cats = rng.integers(0, cfg.n_levels, (n, cfg.n_categorical)).astype(float)
    lo, hi = cfg.age_range
    age = rng.uniform(lo, hi, n)

    eta = np.hstack([x0, static]) @ cfg.beta + slopes @ cfg.slope_coef
    eta = eta + cfg.age_beta * (age - 0.5 * (lo + hi)) / 10.0

    u = rng.uniform(size=n)
    latent = cfg.baseline_hazard_scale * (-np.log1p(-u) * np.exp(-eta)) ** (1.0 / cfg.baseline_hazard_shape)
    latent = np.maximum(latent, 1e-8)
    if cfg.censor_rate > 0:
        rate = _censoring_rate(latent, cfg.censor_rate)
        censor = rng.exponential(1.0 / rate, n)
    else:
        censor = np.full(n, np.inf)
    observed = np.minimum(latent, censor)
    event = latent <= censor

    nominal = np.asarray(cfg.visit_times, dtype=float)
    jitter = rng.normal(0.0, cfg.visit_jitter_sd, (n, nominal.size)) if cfg.visit_jitter_sd > 0 else np.zeros(
        (n, nominal.size)
    )
    jitter[:, 0] = 0.0
    noise = rng.normal(0.0, cfg.measurement_noise_sd, (n, nominal.size, k)) if cfg.measurement_noise_sd > 0 else None

    names, cat_names, static_names = cfg.covariate_names()
    p = len(names)
    holes = rng.uniform(size=(n, nominal.size, p)) < cfg.missing_rate if cfg.missing_rate > 0 else None

    width = len(str(n))
    ids = [f"S{i + 1:0{width}d}" for i in range(n)]
    subjects = []
    for i in range(n):
        times = nominal + jitter[i]
        for v in range(1, times.size):
            times[v] = max(times[v], times[v - 1] + MIN_VISIT_GAP)
        kept = int(np.sum(times <= observed[i]))
        times = times[:kept]
        vals = np.empty((kept, p))
        vals[:, :k] = x0[i] + np.outer(times, slopes[i])
        if noise is not None:
            vals[:, :k] += noise[i, :kept]
        vals[:, k : k + cfg.n_static] = static[i]
        vals[:, k + cfg.n_static : p - 1] = cats[i]
        vals[:, p - 1] = age[i]
        if holes is not None:
            vals[holes[i, :kept]] = np.nan
        subjects.append(SubjectRecord(ids[i], times, vals, float(observed[i]), bool(event[i])))

    cohort = CohortTable(subjects, names, cat_names, static_names)
    truth = GroundTruth(
        eta=eta,
        true_beta=cfg.beta.copy(),
        slope_beta=cfg.slope_coef.copy(),
        baseline=x0,
        slopes=slopes,
        event_time=latent,
        censor_time=censor,
        ids=ids,
        achieved_censoring=float(1.0 - event.mean()),
    )
    return cohort, truth
