"""Gradient-boosted regression trees on the Cox partial likelihood.

Each round takes the gradient ``g`` and diagonal Hessian ``h`` of the negative
log partial likelihood at the current margin ``eta`` and grows one tree by
exact greedy search on the second-order objective

    sum_i [g_i f(x_i) + 1/2 h_i f(x_i)^2] + gamma * T + 1/2 * lambda * sum_j w_j^2

so a leaf holding gradient sum G and Hessian sum H gets weight
``w = -G / (H + lambda)`` and a split scores

    1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma.

Splits with nonpositive gain are not made. ``eta`` then moves by
``learning_rate * f``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._tree import FlatTree
from .dataset import SurvivalDataset
from .errors import NoEvents, ValidationError
from .partial_likelihood import RiskSets, cox_grad_hess, cox_nll

__all__ = ["GbcoxModel", "cox_grad_hess", "fit_gbcox", "risk_score_xgb", "leaf_weight", "split_gain"]


def leaf_weight(g_sum: float, h_sum: float, lambda_l2: float) -> float:
    return -g_sum / (h_sum + lambda_l2)


def split_gain(gl, hl, gr, hr, lambda_l2, gamma):
    def score(g, h):
        return g * g / (h + lambda_l2)

    return 0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma


@njit(cache=True)
def _level_splits(x, sorted_idx, node_of, g, h, n_nodes, lambda_l2, gamma):
    """Best split for every open node of one tree level.

    ``node_of[i]`` is the open-node slot of row i (-1 when the row sits in a
    finished leaf). For each feature the rows are visited in presorted order
    and each node accumulates its left-hand sums; a candidate threshold lies
    halfway between consecutive distinct values within the node.
    """
    n, p = x.shape
    g_tot = np.zeros(n_nodes)
    h_tot = np.zeros(n_nodes)
    for i in range(n):
        k = node_of[i]
        if k >= 0:
            g_tot[k] += g[i]
            h_tot[k] += h[i]
    best_gain = np.zeros(n_nodes)
    best_feat = np.full(n_nodes, -1)
    best_thr = np.zeros(n_nodes)
    gl = np.empty(n_nodes)
    hl = np.empty(n_nodes)
    last = np.empty(n_nodes)
    seen = np.empty(n_nodes, dtype=np.bool_)
    for f in range(p):
        gl[:] = 0.0
        hl[:] = 0.0
        seen[:] = False
        for r in range(n):
            i = sorted_idx[r, f]
            k = node_of[i]
            if k < 0:
                continue
            v = x[i, f]
            if seen[k] and v != last[k]:
                gr = g_tot[k] - gl[k]
                hr = h_tot[k] - hl[k]
                gain = 0.5 * (
                    gl[k] * gl[k] / (hl[k] + lambda_l2)
                    + gr * gr / (hr + lambda_l2)
                    - g_tot[k] * g_tot[k] / (h_tot[k] + lambda_l2)
                ) - gamma
                if gain > best_gain[k]:
                    best_gain[k] = gain
                    best_feat[k] = f
                    best_thr[k] = 0.5 * (last[k] + v)
            gl[k] += g[i]
            hl[k] += h[i]
            last[k] = v
            seen[k] = True
    return best_feat, best_thr, best_gain, g_tot, h_tot


def grow_tree(x, sorted_idx, g, h, max_depth, lambda_l2, gamma) -> FlatTree:
    tree = FlatTree()
    root = tree.add_node()
    n = x.shape[0]
    node_of = np.zeros(n, dtype=np.int64)  # open-node slot per row
    slots = [root]  # tree node id of each open slot
    for depth in range(max_depth + 1):
        feat, thr, gain, g_tot, h_tot = _level_splits(x, sorted_idx, node_of, g, h, len(slots), lambda_l2, gamma)
        new_of = np.full(n, -1, dtype=np.int64)
        new_slots = []
        for k, node in enumerate(slots):
            if h_tot[k] + lambda_l2 <= 0:
                raise AssertionError("leaf curvature H + lambda must be positive")
            if depth == max_depth or feat[k] < 0:
                tree.value[node] = leaf_weight(g_tot[k], h_tot[k], lambda_l2)
                continue
            tree.feature[node] = int(feat[k])
            tree.threshold[node] = float(thr[k])
            left, right = tree.add_node(), tree.add_node()
            tree.left[node], tree.right[node] = left, right
            rows = node_of == k
            go_left = rows & (x[:, feat[k]] <= thr[k])
            new_of[go_left] = len(new_slots)
            new_slots.append(left)
            new_of[rows & ~go_left] = len(new_slots)
            new_slots.append(right)
        if not new_slots:
            break
        node_of, slots = new_of, new_slots
    return tree.freeze()


@dataclass
class GbcoxModel:
    trees: list[FlatTree]
    learning_rate: float
    gamma: float
    lambda_l2: float
    max_depth: int
    n_rounds: int
    base_score: float = 0.0
    feature_names: list[str] = field(default_factory=list)
    train_loss_trace: list[float] = field(default_factory=list)

    def predict(self, x) -> np.ndarray:
        """Margin ``eta(x) = base_score + learning_rate * sum_m f_m(x)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eta = np.full(x.shape[0], self.base_score)
        for tree in self.trees:
            eta += self.learning_rate * tree.value[tree.apply(x)]
        return eta

    risk_score = predict

    def to_json(self) -> dict:
        return {
            "kind": "gbcox",
            "version": 1,
            "learning_rate": self.learning_rate,
            "gamma": self.gamma,
            "lambda_l2": self.lambda_l2,
            "max_depth": self.max_depth,
            "n_rounds": self.n_rounds,
            "base_score": self.base_score,
            "feature_names": self.feature_names,
            "trees": [t.to_json() for t in self.trees],
            "train_loss_trace": self.train_loss_trace,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GbcoxModel":
        if d.get("kind") != "gbcox":
            raise ValidationError("not a gbcox model file")
        return cls(
            [FlatTree.from_json(t) for t in d["trees"]],
            float(d["learning_rate"]),
            float(d["gamma"]),
            float(d["lambda_l2"]),
            int(d["max_depth"]),
            int(d["n_rounds"]),
            float(d["base_score"]),
            list(d["feature_names"]),
            list(d["train_loss_trace"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)


def fit_gbcox(
    ds: SurvivalDataset,
    n_rounds: int = 200,
    learning_rate: float = 0.1,
    max_depth: int = 3,
    gamma: float = 0.0,
    lambda_l2: float = 1.0,
    seed: int = 0,
) -> GbcoxModel:
    """Boost ``n_rounds`` trees. Exact greedy splitting uses no randomness; ``seed`` is recorded only."""
    if ds.has_missing:
        raise ValidationError("gbcox needs complete data")
    if not ds.event.any():
        raise NoEvents("gbcox needs at least one event")
    if learning_rate <= 0 or gamma < 0 or lambda_l2 < 0 or max_depth < 0 or n_rounds < 0:
        raise ValidationError("invalid boosting hyperparameters")
    x = np.ascontiguousarray(ds.x, dtype=float)
    sorted_idx = np.ascontiguousarray(np.argsort(x, axis=0, kind="stable"))
    rs = RiskSets(ds.time)
    eta = np.zeros(ds.n)
    trees = []
    trace = [cox_nll(eta, ds.time, ds.event, rs)]
    for _ in range(n_rounds):
        g, h = cox_grad_hess(eta, ds.time, ds.event, rs)
        tree = grow_tree(x, sorted_idx, g, h, max_depth, lambda_l2, gamma)
        eta += learning_rate * tree.value[tree.apply(x)]
        trees.append(tree)
        trace.append(cox_nll(eta, ds.time, ds.event, rs))
    return GbcoxModel(trees, learning_rate, gamma, lambda_l2, max_depth, n_rounds, 0.0, list(ds.feature_names), trace)


def risk_score_xgb(model: GbcoxModel, x) -> np.ndarray:
    return model.predict(x)
