"""Discrimination metrics for survival predictions.

Harrell's C-index, cumulative/dynamic time-dependent AUC with inverse
probability of censoring weights, its trapezoidal integral, and permutation
feature importance. All scores follow the "higher = riskier" convention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import LengthMismatch, NoComparablePairs, NoEvents
from .estimators import censoring_survival

N_GRID = 100
MAX_IPCW = 100.0
# default AUC grid spans these quantiles of the observed times; the far tail
# holds too few controls for AUC(t) to mean anything
GRID_QUANTILES = (0.1, 0.9)


def _aligned(scores, time, event):
    scores = np.asarray(scores, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    if not (scores.shape == time.shape == event.shape) or scores.ndim != 1:
        raise LengthMismatch("scores, time and event must be aligned 1-d arrays")
    return scores, time, event


def concordance_counts(scores, time, event, block: int = 512) -> tuple[float, int]:
    """(concordant credit, number of comparable pairs).

    A pair (i, j) is comparable when subject i has an event and either
    ``t_i < t_j``, or ``t_i == t_j`` and j is censored. Credit is 1 when
    ``score_i > score_j`` and 0.5 for tied scores. Two events at the same
    time are never comparable.
    """
    scores, time, event = _aligned(scores, time, event)
    cases = np.flatnonzero(event)
    credit = 0.0
    pairs = 0
    for start in range(0, cases.size, block):
        ci = cases[start : start + block]
        ti = time[ci][:, None]
        comparable = (ti < time[None, :]) | ((ti == time[None, :]) & ~event[None, :])
        si = scores[ci][:, None]
        credit += float(np.sum(comparable & (si > scores[None, :])))
        credit += 0.5 * float(np.sum(comparable & (si == scores[None, :])))
        pairs += int(comparable.sum())
    return credit, pairs


def c_index(scores, time, event) -> float:
    """Harrell's concordance index."""
    credit, pairs = concordance_counts(scores, time, event)
    if pairs == 0:
        raise NoComparablePairs("no comparable pairs: need an event strictly before another time")
    return credit / pairs


@dataclass
class AucCurve:
    grid: np.ndarray
    auc: np.ndarray  # NaN where undefined
    defined: np.ndarray
    iauc: float

    def to_json(self) -> list[list[float | None]]:
        return [[float(t), (float(a) if d else None)] for t, a, d in zip(self.grid, self.auc, self.defined)]


def integrate_curve(grid, values, defined=None) -> float:
    """Trapezoidal mean of a curve over the span of its defined points.

    Undefined points are dropped and the integral is divided by the width of
    the remaining span, so a constant curve integrates to that constant.
    """
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if defined is None:
        defined = np.isfinite(values)
    g, v = grid[defined], values[defined]
    if g.size == 0:
        return float("nan")
    if g.size == 1 or g[-1] == g[0]:
        return float(v[0])
    area = np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(g))
    return float(area / (g[-1] - g[0]))


def ipcw_weights(time, event, at=None, cap: float = MAX_IPCW) -> np.ndarray:
    """Inverse censoring-survival weights ``1 / G(t-)`` capped at ``cap``.

    G is the Kaplan-Meier estimate of the censoring distribution, evaluated as
    a left limit so a subject's own censoring never enters its weight.
    """
    time = np.asarray(time, dtype=float)
    at = time if at is None else np.asarray(at, dtype=float)
    g_times, g_surv = censoring_survival(time, event)
    idx = np.searchsorted(g_times, at, side="left")  # jumps strictly before `at`
    g = np.concatenate(([1.0], g_surv))[idx]
    with np.errstate(divide="ignore"):
        w = np.where(g > 0, 1.0 / g, np.inf)
    return np.minimum(w, cap)


def auc_curve(scores, time, event, grid=None, n_grid: int = N_GRID, cap: float = MAX_IPCW) -> AucCurve:
    """Cumulative/dynamic AUC(t) on an even grid between the 10th and 90th percentile of ``time``.

    Cases at ``t`` are events with ``t_i <= t`` weighted by ``1/G(t_i-)``;
    controls are subjects with ``t_j > t``. Ties in score earn half credit.
    Grid points with no cases or no controls are flagged undefined.
    """
    scores, time, event = _aligned(scores, time, event)
    if not event.any():
        raise NoEvents("AUC needs at least one event")
    if grid is None:
        grid = np.linspace(*np.quantile(time, GRID_QUANTILES), n_grid)
    grid = np.asarray(grid, dtype=float)
    w = ipcw_weights(time, event, cap=cap)

    auc = np.full(grid.shape, np.nan)
    for k, t in enumerate(grid):
        cases = event & (time <= t)
        controls = time > t
        n_ctrl = int(controls.sum())
        if not cases.any() or n_ctrl == 0:
            continue
        ctrl = np.sort(scores[controls])
        s = scores[cases]
        below = np.searchsorted(ctrl, s, side="left")
        ties = np.searchsorted(ctrl, s, side="right") - below
        wc = w[cases]
        num = np.sum(wc * (below + 0.5 * ties))
        auc[k] = num / (np.sum(wc) * n_ctrl)
    defined = np.isfinite(auc)
    return AucCurve(grid, auc, defined, integrate_curve(grid, auc, defined))


@dataclass
class ImportanceReport:
    baseline: float
    importance: dict[str, tuple[float, float]] = field(default_factory=dict)
    metric_base: str = "Cindex"

    def ranked(self) -> list[tuple[str, float, float]]:
        return sorted(((k, m, s) for k, (m, s) in self.importance.items()), key=lambda r: -r[1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "importance_mean", "importance_sd"])
            for name, m, s in self.ranked():
                w.writerow([name, repr(m), repr(s)])


def permutation_importance(
    scorer: Callable[[np.ndarray], np.ndarray],
    ds,
    repeats: int = 5,
    seed: int = 0,
    permute: Callable[[np.random.Generator, int], np.ndarray] | None = None,
) -> ImportanceReport:
    """Drop in C-index when one feature column is shuffled.

    ``scorer`` maps a covariate matrix to risk scores. ``permute`` overrides
    how a permutation of ``n`` rows is drawn (defaults to ``rng.permutation``).
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    draw = permute or (lambda r, n: r.permutation(n))
    base = c_index(scorer(ds.x), ds.time, ds.event)
    report = ImportanceReport(baseline=base)
    for j, name in enumerate(ds.feature_names):
        drops = np.empty(repeats)
        for r in range(repeats):
            x = ds.x.copy()
            x[:, j] = x[draw(rng, ds.n), j]
            drops[r] = base - c_index(scorer(x), ds.time, ds.event)
        report.importance[name] = (float(drops.mean()), float(drops.std(ddof=1)) if repeats > 1 else 0.0)
    return report
