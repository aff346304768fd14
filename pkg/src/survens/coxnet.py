"""Penalized Cox regression (LASSO / Elastic Net) by cyclic coordinate descent.

Minimises ``nll(X beta) / n + lam * (alpha * |beta|_1 + (1 - alpha)/2 * |beta|_2^2)``
with Breslow ties. Each coordinate takes a proximal Newton step on the exact
one-dimensional objective (soft-thresholding the quadratic model) and
backtracks if the step would raise the objective, so every sweep is a
descent step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dataset import SurvivalDataset
from .errors import EmptySelection, FeatureMismatch, NoEvents, NonConvergence, ValidationError

log = logging.getLogger(__name__)

TOL = 1e-7
MAX_SWEEPS = 10_000
N_LAMBDA = 100
LAMBDA_MIN_RATIO = 1e-3


def soft_threshold(z: float, gamma: float) -> float:
    """S(z, gamma) = sign(z) * max(|z| - gamma, 0)."""
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


class _SortedCox:
    """Design and outcome sorted by time, with tie-group starts for risk sums."""

    def __init__(self, x, time, event):
        order = np.argsort(time, kind="stable")
        self.order = order
        self.x = np.asfortranarray(x[order], dtype=float)
        ts = time[order]
        self.first = np.searchsorted(ts, ts, side="left").astype(np.int64)
        self.last = np.searchsorted(ts, ts, side="right") - 1
        self.d = event[order].astype(float)
        self.n = x.shape[0]
        self.n_events = self.d.sum()

    def risk(self, v):
        return np.cumsum(v[::-1])[::-1][self.first]

    def nll(self, eta):
        log_s = np.logaddexp.accumulate(eta[::-1])[::-1][self.first]
        return float(-np.sum(self.d * (eta - log_s)))

    def gradient(self, eta):
        """d nll / d beta for every coordinate at once."""
        c = eta.max()
        w = np.exp(eta - c)
        s = self.risk(w)
        acc = np.cumsum(self.d / s)[self.last]
        g = -self.d + w * acc
        return self.x.T @ g


def _penalty(beta, lam, alpha):
    return lam * (alpha * np.abs(beta).sum() + 0.5 * (1.0 - alpha) * beta @ beta)


def _objective(data: _SortedCox, eta, beta, lam, alpha):
    return data.nll(eta) / data.n + _penalty(beta, lam, alpha)


@njit(cache=True)
def _nll_shifted(eta, w, d, first, c, tail):
    """Negative log partial likelihood given w = exp(eta - c)."""
    n = eta.shape[0]
    acc = 0.0
    for k in range(n - 1, -1, -1):
        acc += w[k]
        tail[k] = acc
    total = 0.0
    for i in range(n):
        if d[i] > 0:
            total -= d[i] * (eta[i] - c - np.log(tail[first[i]]))
    return total


@njit(cache=True)
def _sweep(x, d, first, eta, beta, coords, lam, alpha):
    """One cyclic pass of proximal Newton coordinate steps; returns max |change|.

    Rows are sorted by time, so the risk set of row i is every row from
    ``first[i]`` (the start of its tie group) onwards.
    """
    n = x.shape[0]
    c = eta.max()
    w = np.exp(eta - c)
    t0 = np.empty(n)
    t1 = np.empty(n)
    t2 = np.empty(n)
    trial = np.empty(n)
    trial_w = np.empty(n)
    biggest = 0.0
    for j in coords:
        xj = x[:, j]
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for k in range(n - 1, -1, -1):
            wk = w[k]
            a0 += wk
            a1 += wk * xj[k]
            a2 += wk * xj[k] * xj[k]
            t0[k] = a0
            t1[k] = a1
            t2[k] = a2
        grad = 0.0
        hess = 0.0
        nll_old = 0.0
        for i in range(n):
            if d[i] > 0:
                f = first[i]
                si = t0[f]
                ai = t1[f] / si
                grad += d[i] * (ai - xj[i])
                hess += d[i] * (t2[f] / si - ai * ai)
                nll_old -= d[i] * (eta[i] - c - np.log(si))
        grad /= n
        hess /= n
        denom = hess + lam * (1.0 - alpha)
        if denom <= 0.0:
            continue
        old = beta[j]
        z = hess * old - grad
        thr = lam * alpha
        if z > thr:
            new = (z - thr) / denom
        elif z < -thr:
            new = (z + thr) / denom
        else:
            new = 0.0
        if new == old:
            continue
        f_old = nll_old / n + lam * (alpha * abs(old) + 0.5 * (1.0 - alpha) * old * old)
        step = new - old
        accepted = False
        cand = old
        for _ in range(60):
            cand = old + step
            for i in range(n):
                trial[i] = eta[i] + step * xj[i]
                trial_w[i] = np.exp(trial[i] - c)
            f_new = _nll_shifted(trial, trial_w, d, first, c, t0) / n
            f_new += lam * (alpha * abs(cand) + 0.5 * (1.0 - alpha) * cand * cand)
            if f_new <= f_old + 1e-15 * max(1.0, abs(f_old)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            continue
        for i in range(n):
            eta[i] = trial[i]
            w[i] = trial_w[i]
        beta[j] = cand
        if abs(step) > biggest:
            biggest = abs(step)
    return biggest


def _solve(data: _SortedCox, beta, eta, lam, alpha, tol=TOL, max_sweeps=MAX_SWEEPS, trace=None):
    """Coordinate descent at one lambda with an active-set / KKT outer loop."""
    p = beta.size
    everything = np.arange(p, dtype=np.int64)
    sweeps = 0
    full_sweep = True
    while True:
        coords = everything if full_sweep else np.flatnonzero(beta).astype(np.int64)
        delta = _sweep(data.x, data.d, data.first, eta, beta, coords, lam, alpha)
        sweeps += 1
        if trace is not None:
            trace.append(_objective(data, eta, beta, lam, alpha))
        if sweeps >= max_sweeps:
            raise NonConvergence(f"no convergence after {max_sweeps} sweeps at lambda={lam:g}")
        if delta >= tol:
            full_sweep = False
            continue
        if full_sweep:
            return sweeps
        # converged on the active set: check optimality of the zero coordinates
        grad = data.gradient(eta) / data.n
        zero = beta == 0
        if not zero.any() or np.all(np.abs(grad[zero]) <= lam * alpha * (1 + 1e-9) + 1e-12):
            return sweeps
        full_sweep = True


def lambda_max(ds: SurvivalDataset, alpha: float) -> float:
    data = _SortedCox(ds.x, ds.time, ds.event)
    grad = data.gradient(np.zeros(ds.n)) / ds.n
    return float(np.max(np.abs(grad)) / max(alpha, 1e-3))


def lambda_grid(ds: SurvivalDataset, alpha: float, n_lambda: int = N_LAMBDA, min_ratio: float = LAMBDA_MIN_RATIO):
    lmax = lambda_max(ds, alpha)
    return np.geomspace(lmax, lmax * min_ratio, n_lambda)


@dataclass
class CoxnetFit:
    beta: np.ndarray
    lambda_: float
    alpha: float
    feature_names: list[str]
    path: list[tuple[float, np.ndarray]] = field(default_factory=list)
    cv_score: np.ndarray | None = None  # mean held-out log partial likelihood per lambda

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.beta)

    @property
    def selected_names(self) -> list[str]:
        return [self.feature_names[j] for j in self.selected]

    def to_json(self) -> dict:
        return {
            "kind": "coxnet",
            "alpha": self.alpha,
            "lambda": self.lambda_,
            "feature_names": self.feature_names,
            "beta": self.beta.tolist(),
            "selected": self.selected_names,
            "path": [[lam, b.tolist()] for lam, b in self.path],
            "cv_score": None if self.cv_score is None else self.cv_score.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CoxnetFit":
        return cls(
            beta=np.asarray(d["beta"], float),
            lambda_=float(d["lambda"]),
            alpha=float(d["alpha"]),
            feature_names=list(d["feature_names"]),
            path=[(float(lam), np.asarray(b, float)) for lam, b in d["path"]],
            cv_score=None if d.get("cv_score") is None else np.asarray(d["cv_score"], float),
        )


def _check_data(ds: SurvivalDataset):
    if ds.has_missing:
        raise ValidationError("coxnet needs complete data")
    if not ds.event.any():
        raise NoEvents("coxnet needs at least one event")


def fit_path(ds: SurvivalDataset, alpha: float, lambdas, tol=TOL, max_sweeps=MAX_SWEEPS, trace=None):
    """Warm-started solutions along a descending lambda sequence."""
    _check_data(ds)
    if not 0 <= alpha <= 1:
        raise ValidationError("alpha must lie in [0, 1]")
    data = _SortedCox(ds.x, ds.time, ds.event)
    beta = np.zeros(ds.p)
    eta = np.zeros(ds.n)
    path = []
    for lam in lambdas:
        _solve(data, beta, eta, float(lam), alpha, tol, max_sweeps, trace)
        path.append((float(lam), beta.copy()))
    return path


def _folds(event, k, rng):
    """Fold labels stratified on the event indicator."""
    labels = np.empty(event.size, dtype=int)
    offset = 0
    for flag in (True, False):
        idx = np.flatnonzero(event == flag)
        idx = idx[rng.permutation(idx.size)]
        # censored subjects continue the rotation so fold sizes stay balanced
        labels[idx] = (np.arange(idx.size) + offset) % k
        offset += idx.size
    return labels


def stratified_folds(event, k: int, seed: int) -> np.ndarray:
    return _folds(np.asarray(event, bool), k, np.random.default_rng(seed))


def fit_coxnet(
    ds: SurvivalDataset,
    alpha: float = 0.5,
    lambda_grid_: np.ndarray | None = None,
    cv_folds: int = 5,
    seed: int = 0,
    n_lambda: int = N_LAMBDA,
    folds: np.ndarray | None = None,
) -> CoxnetFit:
    """Fit the penalized path and pick lambda by K-fold held-out partial likelihood."""
    _check_data(ds)
    if ds.n < cv_folds:
        raise ValidationError("need at least as many subjects as folds")
    lambdas = np.asarray(lambda_grid_ if lambda_grid_ is not None else lambda_grid(ds, alpha, n_lambda), float)
    if np.any(np.diff(lambdas) > 0):
        raise ValidationError("lambda grid must be descending")
    path = fit_path(ds, alpha, lambdas)
    if cv_folds < 2 or lambdas.size == 1:
        lam, beta = path[-1]
        return CoxnetFit(beta, lam, alpha, list(ds.feature_names), path)

    labels = folds if folds is not None else stratified_folds(ds.event, cv_folds, seed)
    score = np.zeros(lambdas.size)
    for k in range(cv_folds):
        tr, va = labels != k, labels == k
        train, val = ds.rows(tr), ds.rows(va)
        if not train.event.any() or not val.event.any():
            continue
        fold_path = fit_path(train, alpha, lambdas)
        vdata = _SortedCox(val.x, val.time, val.event)
        for i, (_, b) in enumerate(fold_path):
            score[i] -= vdata.nll(vdata.x @ b)
    score /= cv_folds
    best = int(np.argmax(score))
    lam, beta = path[best]
    return CoxnetFit(beta, lam, alpha, list(ds.feature_names), path, score)


def select_features(fit: CoxnetFit, ds: SurvivalDataset) -> SurvivalDataset:
    if list(fit.feature_names) != list(ds.feature_names):
        raise FeatureMismatch("fit and dataset have different feature names")
    if fit.selected.size == 0:
        raise EmptySelection("penalized fit selected no features")
    return ds.columns(fit.selected_names)


def top_k_features(fit: CoxnetFit, k: int = 10) -> list[str]:
    """First ``k`` features to enter the path; later entries ranked by final |beta|."""
    p = len(fit.feature_names)
    entry = np.full(p, len(fit.path))
    for i, (_, b) in enumerate(fit.path):
        newly = (b != 0) & (entry == len(fit.path))
        entry[newly] = i
    last = np.abs(fit.path[-1][1]) if fit.path else np.zeros(p)
    order = sorted(range(p), key=lambda j: (entry[j], -last[j], j))
    return [fit.feature_names[j] for j in order[: min(k, p)]]
