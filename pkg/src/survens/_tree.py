"""Flat binary-tree storage shared by the survival forest and the boosted trees."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAF = -1


@dataclass
class FlatTree:
    """Node arrays; ``feature[k] == LEAF`` marks a leaf and ``value[k]`` its payload index or weight.

    Samples go left when ``x[feature] <= threshold``.
    """

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add_node(self) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def freeze(self) -> "FlatTree":
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=float)
        return self

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(np.asarray(self.feature) == LEAF))

    def apply(self, x) -> np.ndarray:
        """Leaf node index reached by each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        while True:
            f = self.feature[node]
            internal = f != LEAF
            if not internal.any():
                return node
            r = rows[internal]
            k = node[internal]
            go_left = x[r, f[internal]] <= self.threshold[k]
            node[r] = np.where(go_left, self.left[k], self.right[k])

    def to_json(self) -> dict:
        return {
            "feature": np.asarray(self.feature).tolist(),
            "threshold": np.asarray(self.threshold).tolist(),
            "left": np.asarray(self.left).tolist(),
            "right": np.asarray(self.right).tolist(),
            "value": np.asarray(self.value).tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "FlatTree":
        return cls(d["feature"], d["threshold"], d["left"], d["right"], d["value"]).freeze()
