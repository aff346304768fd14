"""Ensemble averaging (EA) and Bayesian model averaging (BMA) of risk scores.

The three learners emit risks on unrelated scales (forest hazards, network
log-risks, boosting margins), so scores are z-normalized per model before any
aggregation. BMA weights are a softmax of validation log partial likelihoods
plus log prior: ``w_m ∝ prior_m * exp(-nll_m)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, NoEvents, ValidationError
from .partial_likelihood import cox_nll


@dataclass
class RiskScores:
    model_id: str
    scores: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError(f"{self.model_id}: risk scores must be finite")


def normalize(rs: RiskScores) -> RiskScores:
    """Shift and scale to mean 0, sd 1 (population sd); constant scores map to 0."""
    s = rs.scores
    sd = s.std()
    z = (s - s.mean()) / sd if sd > 0 else np.zeros_like(s)
    return RiskScores(rs.model_id, z, True)


def _stack(scores: list[RiskScores]) -> np.ndarray:
    if not scores:
        raise ValidationError("need at least one model")
    n = scores[0].scores.shape[0]
    for rs in scores:
        if rs.scores.shape != (n,):
            raise LengthMismatch(f"{rs.model_id} has {rs.scores.shape[0]} scores, expected {n}")
    return np.vstack([rs.scores for rs in scores])


def aggregate_ea(scores: list[RiskScores], model_id: str = "EA") -> RiskScores:
    """Equal-weight mean of the model scores."""
    return RiskScores(model_id, _stack(scores).mean(axis=0), all(s.normalized for s in scores))


@dataclass
class BmaWeights:
    weights: np.ndarray
    source: str = "ValidationLikelihood"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValidationError("BMA weights must be nonnegative and sum to 1")


def _softmax(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def bma_weights_from_nll(nll, prior=None) -> BmaWeights:
    nll = np.asarray(nll, dtype=float)
    prior = np.full(nll.size, 1.0 / nll.size) if prior is None else np.asarray(prior, dtype=float)
    if prior.shape != nll.shape or np.any(prior < 0) or prior.sum() <= 0:
        raise ValidationError("prior must be a nonnegative vector, one entry per model")
    with np.errstate(divide="ignore"):
        w = _softmax(np.log(prior / prior.sum()) - nll)
    return BmaWeights(w / w.sum())


def compute_bma_weights(val_scores: list[RiskScores], time, event, prior=None) -> BmaWeights:
    """Weights from one validation set; scores are normalized before the likelihood."""
    event = np.asarray(event).astype(bool)
    if not event.any():
        raise NoEvents("BMA weights need a validation event")
    _stack(val_scores)
    nll = [cox_nll(normalize(rs).scores, time, event) for rs in val_scores]
    return bma_weights_from_nll(nll, prior)


def average_weights(per_fold: list[BmaWeights]) -> BmaWeights:
    """Mean of per-fold weights, renormalised."""
    w = np.mean([b.weights for b in per_fold], axis=0)
    return BmaWeights(w / w.sum())


def aggregate_bma(scores: list[RiskScores], w: BmaWeights, model_id: str = "BMA") -> RiskScores:
    stacked = _stack(scores)
    if w.weights.shape != (stacked.shape[0],):
        raise LengthMismatch("one weight per model required")
    return RiskScores(model_id, w.weights @ stacked, all(s.normalized for s in scores))
