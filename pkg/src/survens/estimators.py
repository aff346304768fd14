"""Nonparametric estimators: Kaplan-Meier and Nelson-Aalen."""

from __future__ import annotations

import numpy as np


def event_table(time, event, weights=None):
    """Distinct event times with event counts and numbers at risk.

    Returns ``(times, d, r)`` where ``times`` are the sorted distinct times at
    which at least one event occurs, ``d`` the (weighted) event count and
    ``r`` the (weighted) number with ``t_j >= time``.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    w = np.ones_like(time) if weights is None else np.asarray(weights, dtype=float)
    order = np.argsort(time, kind="stable")
    ts, es, ws = time[order], event[order], w[order]
    uniq, first = np.unique(ts, return_index=True)
    # at risk at each distinct time = weight of everyone at or after it
    tail = np.cumsum(ws[::-1])[::-1]
    r = tail[first]
    d = np.add.reduceat(ws * es, first) if len(ts) else np.zeros(0)
    keep = d > 0
    return uniq[keep], d[keep], r[keep]


def nelson_aalen(time, event, weights=None):
    """Nelson-Aalen cumulative hazard ``H(t) = sum_{t_i <= t} d_i / r_i``.

    Returns the jump times and the value of ``H`` just after each jump.
    """
    times, d, r = event_table(time, event, weights)
    return times, np.cumsum(d / r)


def step_eval(jump_times, values, t, before=0.0):
    """Evaluate a right-continuous step function at ``t``."""
    jump_times = np.asarray(jump_times, dtype=float)
    idx = np.searchsorted(jump_times, np.asarray(t, dtype=float), side="right")
    padded = np.concatenate(([before], np.asarray(values, dtype=float)))
    return padded[idx]


def kaplan_meier(time, event):
    """Kaplan-Meier survival estimate with Greenwood variance.

    Returns ``(times, surv, var)`` at the distinct event times.
    """
    times, d, r = event_table(time, event)
    surv = np.cumprod(1.0 - d / r)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(r > d, d / (r * (r - d)), np.inf)
        # Greenwood is undefined once the curve reaches 0; report 0 there
        var = np.where(surv > 0, surv**2 * np.cumsum(terms), 0.0)
    return times, surv, var


def censoring_survival(time, event):
    """Kaplan-Meier estimate of the censoring distribution G(t) = P(C > t).

    The event indicator is flipped, so censorings are the "events".
    """
    return kaplan_meier(time, ~np.asarray(event).astype(bool))[:2]
