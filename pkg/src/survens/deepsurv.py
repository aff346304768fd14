"""DeepSurv: a feedforward log-risk network trained on the Cox partial likelihood.

Training is full batch (risk sets couple every subject), with inverted
dropout on hidden activations, global-norm gradient clipping and either
plain gradient descent or Adam. Backpropagation is written out by hand.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import SurvivalDataset
from .errors import DivergedLoss, NoEvents, ValidationError
from .partial_likelihood import RiskSets, cox_grad_hess, cox_nll

__all__ = ["Activation", "Optimizer", "MlpConfig", "DeepSurvModel", "cox_nll", "fit_deepsurv", "risk_score_ds"]

CLIP_NORM = 5.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class Activation(str, enum.Enum):
    ReLU = "relu"
    Tanh = "tanh"


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    Adam = "adam"


@dataclass
class MlpConfig:
    layer_widths: list[int] = field(default_factory=lambda: [32, 32])  # hidden layers; output width 1 implied
    activation: Activation = Activation.ReLU
    dropout: float = 0.1
    optimizer: Optimizer = Optimizer.Adam
    learning_rate: float = 1e-3
    epochs: int = 500
    weight_init_seed: int = 0
    clip_norm: float = CLIP_NORM

    def __post_init__(self):
        self.activation = Activation(self.activation)
        self.optimizer = Optimizer(self.optimizer)
        self.layer_widths = [int(w) for w in self.layer_widths]
        if any(w < 1 for w in self.layer_widths):
            raise ValidationError("layer widths must be positive")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be nonnegative")

    def to_json(self) -> dict:
        return {
            "layer_widths": self.layer_widths,
            "activation": self.activation.value,
            "dropout": self.dropout,
            "optimizer": self.optimizer.value,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "weight_init_seed": self.weight_init_seed,
            "clip_norm": self.clip_norm,
        }


def _act(z, kind):
    return np.maximum(z, 0.0) if kind is Activation.ReLU else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(float) if kind is Activation.ReLU else 1.0 - a * a


def init_params(p: int, cfg: MlpConfig) -> list[np.ndarray]:
    """[W1, b1, ..., Wk, bk, W_out]; He-uniform for ReLU layers, Xavier-uniform otherwise."""
    rng = np.random.default_rng(cfg.weight_init_seed)
    params = []
    fan_in = p
    for width in cfg.layer_widths:
        if cfg.activation is Activation.ReLU:
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + width))
        params.append(rng.uniform(-bound, bound, (fan_in, width)))
        params.append(np.zeros(width))
        fan_in = width
    bound = np.sqrt(6.0 / (fan_in + 1))
    params.append(rng.uniform(-bound, bound, (fan_in, 1)))
    return params


def forward(params, x, kind, dropout=0.0, rng=None):
    """Log-risk for each row, plus the cache backprop needs."""
    h = x
    cache = []
    n_hidden = (len(params) - 1) // 2
    for layer in range(n_hidden):
        w, b = params[2 * layer], params[2 * layer + 1]
        z = h @ w + b
        a = _act(z, kind)
        if dropout > 0 and rng is not None:
            mask = (rng.uniform(size=a.shape) >= dropout) / (1.0 - dropout)
        else:
            mask = None
        out = a * mask if mask is not None else a
        cache.append((h, z, a, mask))
        h = out
    f = (h @ params[-1])[:, 0]
    cache.append(h)
    return f, cache


def backward(params, cache, dloss_df, kind):
    """Gradients of the loss w.r.t. every parameter given dL/df."""
    grads = [None] * len(params)
    h_last = cache[-1]
    grads[-1] = h_last.T @ dloss_df[:, None]
    delta = dloss_df[:, None] @ params[-1].T  # dL/d(layer output)
    n_hidden = (len(params) - 1) // 2
    for layer in range(n_hidden - 1, -1, -1):
        h_in, z, a, mask = cache[layer]
        if mask is not None:
            delta = delta * mask
        dz = delta * _act_grad(z, a, kind)
        grads[2 * layer] = h_in.T @ dz
        grads[2 * layer + 1] = dz.sum(axis=0)
        delta = dz @ params[2 * layer].T
    return grads


def loss_and_grads(params, x, time, event, kind, dropout=0.0, rng=None, risk_sets=None):
    """Cox negative log partial likelihood of the network output and its parameter gradients."""
    f, cache = forward(params, x, kind, dropout, rng)
    loss = cox_nll(f, time, event, risk_sets)
    g, _ = cox_grad_hess(f, time, event, risk_sets)
    return loss, backward(params, cache, g, kind)


@dataclass
class DeepSurvModel:
    params: list[np.ndarray]
    config: MlpConfig
    train_loss_trace: list[float] = field(default_factory=list)
    feature_names: list[str] = field(default_factory=list)

    def risk_score(self, x) -> np.ndarray:
        """Deterministic forward pass with dropout off."""
        f, _ = forward(self.params, np.atleast_2d(np.asarray(x, dtype=float)), self.config.activation)
        return f

    def to_json(self) -> dict:
        return {
            "kind": "deepsurv",
            "version": 1,
            "config": self.config.to_json(),
            "feature_names": self.feature_names,
            "layers": [{"shape": list(p.shape), "values": p.ravel(order="C").tolist()} for p in self.params],
            "train_loss_trace": self.train_loss_trace,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DeepSurvModel":
        if d.get("kind") != "deepsurv":
            raise ValidationError("not a DeepSurv model file")
        params = [np.asarray(layer["values"], float).reshape(layer["shape"]) for layer in d["layers"]]
        return cls(params, MlpConfig(**d["config"]), list(d["train_loss_trace"]), list(d["feature_names"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)


def fit_deepsurv(ds: SurvivalDataset, cfg: MlpConfig | None = None) -> DeepSurvModel:
    """Full-batch training; the trace holds the per-event training loss of each epoch."""
    cfg = cfg or MlpConfig()
    if ds.has_missing:
        raise ValidationError("DeepSurv needs complete data")
    n_events = int(ds.event.sum())
    if n_events == 0:
        raise NoEvents("DeepSurv needs at least one event")
    params = init_params(ds.p, cfg)
    rs = RiskSets(ds.time)
    rng = np.random.default_rng([cfg.weight_init_seed, 1])
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2 = ADAM_BETAS
    trace: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        loss, grads = loss_and_grads(params, ds.x, ds.time, ds.event, cfg.activation, cfg.dropout, rng, rs)
        loss /= n_events
        if not np.isfinite(loss):
            raise DivergedLoss(f"non-finite training loss at epoch {epoch}", trace)
        trace.append(float(loss))
        grads = [g / n_events for g in grads]
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > cfg.clip_norm:
            grads = [g * (cfg.clip_norm / norm) for g in grads]
        if cfg.optimizer is Optimizer.SGD:
            for p, g in zip(params, grads):
                p -= cfg.learning_rate * g
        else:
            for k, (p, g) in enumerate(zip(params, grads)):
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                m_hat = m[k] / (1 - b1**epoch)
                v_hat = v[k] / (1 - b2**epoch)
                p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if any(not np.all(np.isfinite(p)) for p in params):
        raise DivergedLoss("non-finite weights after training", trace)
    return DeepSurvModel(params, cfg, trace, list(ds.feature_names))


def risk_score_ds(model: DeepSurvModel, x) -> np.ndarray:
    return model.risk_score(x)
