"""Random survival forest: bootstrap survival trees with log-rank splitting.

Each leaf stores the Nelson-Aalen cumulative hazard of its in-bag samples;
the forest hazard is the average of the per-tree hazards and survival is
``exp(-H)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._tree import FlatTree
from .dataset import SurvivalDataset
from .errors import TooFewEvents, ValidationError
from .estimators import nelson_aalen, step_eval

MAX_THRESHOLDS = 32
FORMAT_VERSION = 1


@njit(cache=True)
def logrank_statistic(time_desc, event_desc, left):
    """Squared standardized two-sample log-rank statistic.

    Inputs are sorted by descending time; ``left`` flags group membership.
    Returns 0 when the variance vanishes.
    """
    n = time_desc.shape[0]
    y = 0.0
    yl = 0.0
    num = 0.0
    var = 0.0
    i = 0
    while i < n:
        j = i
        d = 0.0
        dl = 0.0
        cnt = 0.0
        cntl = 0.0
        while j < n and time_desc[j] == time_desc[i]:
            cnt += 1.0
            if left[j]:
                cntl += 1.0
                if event_desc[j]:
                    dl += 1.0
            if event_desc[j]:
                d += 1.0
            j += 1
        y += cnt
        yl += cntl
        if d > 0:
            num += dl - yl * d / y
            if y > 1:
                frac = yl / y
                var += frac * (1.0 - frac) * (y - d) / (y - 1.0) * d
        i = j
    if var <= 0.0:
        return 0.0
    return num * num / var


@njit(cache=True)
def _thresholds(col, u, out):
    """Midpoints between sorted distinct values; a random subset when too many.

    ``u`` holds uniforms for a partial Fisher-Yates draw. Returns the count.
    """
    v = np.sort(col)
    m = 0
    for i in range(1, v.shape[0]):
        if v[i] != v[i - 1]:
            m += 1
    if m == 0:
        return 0
    mids = np.empty(m)
    k = 0
    for i in range(1, v.shape[0]):
        if v[i] != v[i - 1]:
            mids[k] = 0.5 * (v[i] + v[i - 1])
            k += 1
    limit = out.shape[0]
    if m <= limit:
        out[:m] = mids
        return m
    for i in range(limit):
        j = i + int(u[i] * (m - i))
        tmp = mids[i]
        mids[i] = mids[j]
        mids[j] = tmp
    out[:] = np.sort(mids[:limit])
    return limit


@njit(cache=True)
def _best_split(time_desc, event_desc, values, u, min_events):
    """Best log-rank split over the candidate columns of ``values``.

    Rows are sorted by descending time. Returns (column, threshold, statistic);
    column is -1 when no admissible split exists.
    """
    n = time_desc.shape[0]
    best_stat = 0.0
    best_f = -1
    best_t = 0.0
    left = np.empty(n, dtype=np.bool_)
    thr = np.empty(u.shape[1])
    for f in range(values.shape[1]):
        n_thr = _thresholds(values[:, f], u[f], thr)
        for k in range(n_thr):
            c = thr[k]
            el = 0
            er = 0
            for i in range(n):
                left[i] = values[i, f] <= c
                if event_desc[i]:
                    if left[i]:
                        el += 1
                    else:
                        er += 1
            if el < min_events or er < min_events:
                continue
            stat = logrank_statistic(time_desc, event_desc, left)
            if stat > best_stat:
                best_stat = stat
                best_f = f
                best_t = c
    return best_f, best_t, best_stat


@dataclass
class SurvivalTree:
    tree: FlatTree
    leaf_times: list[np.ndarray]  # per leaf: sorted distinct event times
    leaf_cumhaz: list[np.ndarray]  # per leaf: Nelson-Aalen value after each jump
    oob_fraction: float = float("nan")

    def leaves(self, x) -> np.ndarray:
        """Leaf slot (index into leaf_times) for each row."""
        return self.tree.value[self.tree.apply(x)].astype(np.int64)

    def cumhaz(self, x, t) -> np.ndarray:
        """H(t | x) for each row of x; ``t`` scalar or 1-d grid -> (n,) or (n, len(t))."""
        slots = self.leaves(x)
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((slots.size, t_arr.size))
        for s in np.unique(slots):
            out[slots == s] = step_eval(self.leaf_times[s], self.leaf_cumhaz[s], t_arr)
        return out[:, 0] if np.ndim(t) == 0 else out

    def terminal_cumhaz(self, x) -> np.ndarray:
        totals = np.array([h[-1] if h.size else 0.0 for h in self.leaf_cumhaz])
        return totals[self.leaves(x)]

    def to_json(self) -> dict:
        return {
            "tree": self.tree.to_json(),
            "leaf_times": [a.tolist() for a in self.leaf_times],
            "leaf_cumhaz": [a.tolist() for a in self.leaf_cumhaz],
            "oob_fraction": self.oob_fraction,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SurvivalTree":
        return cls(
            FlatTree.from_json(d["tree"]),
            [np.asarray(a, float) for a in d["leaf_times"]],
            [np.asarray(a, float) for a in d["leaf_cumhaz"]],
            float(d["oob_fraction"]),
        )


@dataclass
class RsfModel:
    trees: list[SurvivalTree]
    mtry: int
    min_node_events: int
    seed: int
    t_max: float  # largest training event time; risk horizon
    feature_names: list[str] = field(default_factory=list)

    @property
    def b(self) -> int:
        return len(self.trees)

    def predict_cumhaz(self, x, t) -> np.ndarray:
        """Forest cumulative hazard: the mean of the per-tree hazards."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        total = None
        for tree in self.trees:
            h = tree.cumhaz(x, t)
            total = h if total is None else total + h
        return total / len(self.trees)

    def predict_survival(self, x, t) -> np.ndarray:
        return np.exp(-self.predict_cumhaz(x, t))

    def risk_score(self, x) -> np.ndarray:
        """Forest cumulative hazard at ``t_max``; higher means riskier."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.mean([tree.terminal_cumhaz(x) for tree in self.trees], axis=0)

    def to_json(self) -> dict:
        return {
            "kind": "rsf",
            "version": FORMAT_VERSION,
            "mtry": self.mtry,
            "min_node_events": self.min_node_events,
            "seed": self.seed,
            "t_max": self.t_max,
            "feature_names": self.feature_names,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, d: dict) -> "RsfModel":
        if d.get("kind") != "rsf" or d.get("version") != FORMAT_VERSION:
            raise ValidationError("not a version-1 RSF model file")
        return cls(
            [SurvivalTree.from_json(t) for t in d["trees"]],
            int(d["mtry"]),
            int(d["min_node_events"]),
            int(d["seed"]),
            float(d["t_max"]),
            list(d["feature_names"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)


def grow_tree(x, time, event, mtry, min_node_events, rng, max_depth=None) -> SurvivalTree:
    """Grow one survival tree on the given (already resampled) rows."""
    n, p = x.shape
    tree = FlatTree()
    leaf_times: list[np.ndarray] = []
    leaf_cumhaz: list[np.ndarray] = []
    stack = [(tree.add_node(), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        t_node, e_node = time[idx], event[idx]
        n_events = int(e_node.sum())
        split = None
        can_split = (
            n_events >= 2 * min_node_events
            and t_node.min() < t_node.max()
            and (max_depth is None or depth < max_depth)
        )
        if can_split:
            order = np.argsort(-t_node, kind="stable")
            feats = rng.choice(p, size=mtry, replace=False)
            cols = x[idx[order]][:, feats]
            u = rng.random((mtry, MAX_THRESHOLDS))
            f, c, stat = _best_split(t_node[order], e_node[order], cols, u, min_node_events)
            if f >= 0 and stat > 0:
                split = (int(feats[f]), float(c))
        if split is None:
            times, cumhaz = nelson_aalen(t_node, e_node)
            tree.value[node] = float(len(leaf_times))
            leaf_times.append(times)
            leaf_cumhaz.append(cumhaz)
            continue
        f, c = split
        go_left = x[idx, f] <= c
        tree.feature[node] = f
        tree.threshold[node] = c
        left, right = tree.add_node(), tree.add_node()
        tree.left[node], tree.right[node] = left, right
        stack.append((right, idx[~go_left], depth + 1))
        stack.append((left, idx[go_left], depth + 1))
    return SurvivalTree(tree.freeze(), leaf_times, leaf_cumhaz)


def fit_rsf(
    ds: SurvivalDataset,
    b: int = 500,
    mtry: int | None = None,
    min_node_events: int = 3,
    seed: int = 0,
    bootstrap: bool = True,
    max_depth: int | None = None,
) -> RsfModel:
    if ds.has_missing:
        raise ValidationError("RSF needs complete data")
    if b < 1:
        raise ValidationError("need at least one tree")
    p = ds.p
    mtry = int(math.ceil(math.sqrt(p))) if mtry is None else int(mtry)
    if not 1 <= mtry <= p:
        raise ValidationError(f"mtry must lie in [1, {p}]")
    if int(ds.event.sum()) < min_node_events:
        raise TooFewEvents(f"need at least {min_node_events} events, have {int(ds.event.sum())}")
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(b):
        if bootstrap:
            rows = rng.integers(0, ds.n, ds.n)
            oob = 1.0 - np.unique(rows).size / ds.n
        else:
            rows = np.arange(ds.n)
            oob = 0.0
        tree = grow_tree(ds.x[rows], ds.time[rows], ds.event[rows], mtry, min_node_events, rng, max_depth)
        tree.oob_fraction = oob
        trees.append(tree)
    t_max = float(ds.time[ds.event].max())
    return RsfModel(trees, mtry, min_node_events, seed, t_max, list(ds.feature_names))


def predict_cumhaz(model: RsfModel, x, t):
    return model.predict_cumhaz(x, t)


def risk_score_rsf(model: RsfModel, x) -> np.ndarray:
    return model.risk_score(x)
