"""Multiple imputation by chained equations and Rubin's-rules pooling.

Each incomplete column is regressed on every other column with a conjugate
normal-inverse-gamma Bayesian linear regression; missing cells are replaced
by a posterior-predictive draw. Outcomes never enter the imputation model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dataset import SurvivalDataset
from .errors import NoCompletePredictors, SingularDesign

log = logging.getLogger(__name__)

PRIOR_PRECISION = 1e-6
PRIOR_A = 1e-3
PRIOR_B = 1e-3
RIDGE = 1e-8


@dataclass
class ImputationSet:
    datasets: list[np.ndarray]
    missing: np.ndarray  # boolean mask of the originally missing cells
    m: int
    iterations: int
    seed: int

    def completed(self, template: SurvivalDataset) -> list[SurvivalDataset]:
        return [template.with_x(x) for x in self.datasets]


def _posterior_draw(gram, zy, yy, n_obs, rng):
    """Draw (beta, sigma^2) from the NIG posterior given sufficient statistics."""
    k = gram.shape[0]
    prec = gram + PRIOR_PRECISION * np.eye(k)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(prec + RIDGE * np.eye(k))
        except np.linalg.LinAlgError:
            raise SingularDesign("imputation design is rank deficient even with ridge fallback") from None
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, zy))
    a_n = PRIOR_A + 0.5 * n_obs
    b_n = PRIOR_B + 0.5 * max(yy - mean @ prec @ mean, 0.0)
    sigma2 = b_n / rng.gamma(a_n)
    beta = mean + np.sqrt(sigma2) * np.linalg.solve(chol.T, rng.standard_normal(k))
    return beta, sigma2


def _chain(x, miss, order, iterations, rng):
    n, p = x.shape
    a = np.empty((n, p + 1))
    a[:, 0] = 1.0
    a[:, 1:] = x
    col_mean = np.nanmean(np.where(miss, np.nan, x), axis=0)
    for j in order:
        a[miss[:, j], j + 1] = col_mean[j]
    gram = a.T @ a

    everything = np.arange(p + 1)
    for _ in range(iterations):
        for j in order:
            c = j + 1
            u = np.flatnonzero(miss[:, j])
            pred = everything[everything != c]
            au = a[np.ix_(u, pred)]
            yu = a[u, c]
            g_oo = gram[np.ix_(pred, pred)] - au.T @ au
            zy = gram[pred, c] - au.T @ yu
            yy = gram[c, c] - yu @ yu
            beta, sigma2 = _posterior_draw(g_oo, zy, yy, n - u.size, rng)
            a[u, c] = au @ beta + np.sqrt(sigma2) * rng.standard_normal(u.size)
            col = a.T @ a[:, c]
            gram[:, c] = col
            gram[c, :] = col
    return a[:, 1:].copy()


def mice(x, m: int = 20, iterations: int = 50, seed: int = 0) -> ImputationSet:
    """Impute NaN cells of ``x`` ``m`` times.

    Chains are independent: chain ``k`` draws from ``default_rng([seed, k])``.
    Incomplete columns are visited in order of increasing missingness.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("x must be a 2-d matrix")
    if m < 1 or iterations < 0:
        raise ValueError("need m >= 1 and iterations >= 0")
    miss = np.isnan(x)
    counts = miss.sum(axis=0)
    empty = np.flatnonzero(counts == x.shape[0])
    if empty.size:
        raise NoCompletePredictors(f"columns {empty.tolist()} have no observed values")
    incomplete = np.flatnonzero(counts > 0)
    order = incomplete[np.argsort(counts[incomplete], kind="stable")]
    if order.size == 0:
        return ImputationSet([x.copy() for _ in range(m)], miss, m, iterations, seed)
    if order.size == x.shape[1]:
        log.debug("no fully observed column; chains start from mean fill")
    out = [_chain(x, miss, order, iterations, np.random.default_rng([seed, k])) for k in range(m)]
    return ImputationSet(out, miss, m, iterations, seed)


def mice_dataset(ds: SurvivalDataset, m: int = 20, iterations: int = 50, seed: int = 0) -> list[SurvivalDataset]:
    """Impute a dataset's covariates; time and event are carried, not used."""
    return mice(ds.x, m, iterations, seed).completed(ds)


@dataclass
class PooledEstimate:
    mean: float
    within_var: float
    between_var: float
    total_var: float
    df: float
    ci_low: float
    ci_high: float
    level: float
    m: int
    degenerate: bool = False  # between-imputation variance is zero

    def to_json(self) -> dict:
        return {
            "mean": self.mean,
            "within_var": self.within_var,
            "between_var": self.between_var,
            "total_var": self.total_var,
            "df": None if np.isinf(self.df) else self.df,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "level": self.level,
            "m": self.m,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PooledEstimate":
        d = dict(d)
        d["df"] = float("inf") if d["df"] is None else d["df"]
        return cls(**d)


def pool(estimates, level: float = 0.95) -> PooledEstimate:
    """Combine ``(theta_hat, var_hat)`` pairs from M imputations by Rubin's rules.

    Degrees of freedom are ``(M - 1) * (1 + W / ((1 + 1/M) B))``. When the
    between-imputation variance is zero the interval uses the normal quantile
    and the estimate is flagged ``degenerate``.
    """
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 2 or est.shape[1] != 2:
        raise ValueError("estimates must be a sequence of (theta_hat, var_hat) pairs")
    m = est.shape[0]
    if m < 2:
        raise ValueError("pooling needs at least two imputations")
    if np.any(est[:, 1] < 0):
        raise ValueError("variances must be nonnegative")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    theta, var = est[:, 0], est[:, 1]
    mean = float(theta.mean())
    w = float(var.mean())
    b = float(np.sum((theta - mean) ** 2) / (m - 1))
    inflated = (1.0 + 1.0 / m) * b
    t = w + inflated
    q = 1.0 - (1.0 - level) / 2.0
    if b == 0.0:
        df = float("inf")
        crit = float(stats.norm.ppf(q))
        degenerate = True
    else:
        df = (m - 1) * (1.0 + w / inflated)
        crit = float(stats.t.ppf(q, df))
        degenerate = False
    half = crit * np.sqrt(t)
    return PooledEstimate(mean, w, b, t, df, mean - half, mean + half, level, m, degenerate)
