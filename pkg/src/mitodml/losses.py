"""Binary cross entropy, triplet hinge and the joint objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor_core import ParameterSet

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
ALPHA_GRID = (0.01, 0.1, 0.5)
MARGIN_GRID = (0.5, 1.0, 1.5)


@dataclass
class LossConfig:
    alpha: float = 0.1
    margin: float = 0.5
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.alpha < 0 or self.margin <= 0 or self.weight_decay < 0:
            raise ValueError(f"invalid loss config {self}")


def bce_loss(prob, labels, eps: float = PROB_EPS) -> float:
    """Mean binary cross entropy with probabilities clamped to [eps, 1-eps]."""
    prob = np.asarray(prob, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if prob.shape != labels.shape:
        raise ValueError(f"length mismatch: {prob.shape} probabilities vs {labels.shape} labels")
    p = np.clip(prob, eps, 1 - eps)
    return float(np.mean(-(labels * np.log(p) + (1 - labels) * np.log(1 - p))))


def bce_logit_grad(prob, labels) -> np.ndarray:
    """dBCE/dlogits for a two-logit softmax head, shape (N, 2).

    This is the derivative of the unclamped loss, so saturated but wrong
    predictions keep a gradient.
    """
    r = (np.asarray(prob) - np.asarray(labels, dtype=prob.dtype)) / len(prob)
    return np.stack([-r, r], axis=1)


def triplet_loss(d_ap, d_an, margin: float) -> float:
    """(1/T) sum max(0, d_ap - d_an + m) over squared distances."""
    d_ap = np.asarray(d_ap, dtype=np.float64)
    d_an = np.asarray(d_an, dtype=np.float64)
    if d_ap.size == 0:
        log.info("no triplets mined; triplet loss is 0")
        return 0.0
    return float(np.mean(np.maximum(0.0, d_ap - d_an + margin)))


def triplet_loss_and_grad(embeddings: np.ndarray, triplets: np.ndarray, margin: float):
    """Triplet loss on embeddings plus its gradient w.r.t. the embeddings."""
    grad = np.zeros_like(embeddings)
    if len(triplets) == 0:
        return 0.0, grad
    a, p, n = embeddings[triplets[:, 0]], embeddings[triplets[:, 1]], embeddings[triplets[:, 2]]
    d_ap = np.sum((a - p) ** 2, axis=1)
    d_an = np.sum((a - n) ** 2, axis=1)
    value = triplet_loss(d_ap, d_an, margin)
    active = (d_ap - d_an + margin) > 0
    t = len(triplets)
    s = active[:, None].astype(embeddings.dtype) * (2.0 / t)
    np.add.at(grad, triplets[:, 0], s * (n - p))
    np.add.at(grad, triplets[:, 1], -s * (a - p))
    np.add.at(grad, triplets[:, 2], s * (a - n))
    return value, grad


def weight_penalty(params: ParameterSet) -> float:
    """Sum of squared conv/dense weights; biases and batch-norm excluded."""
    return float(sum(np.sum(params[k].astype(np.float64) ** 2) for k in params.weights()))


def weight_penalty_grads(params: ParameterSet, weight_decay: float) -> dict[str, np.ndarray]:
    return {k: (2.0 * weight_decay) * params[k] for k in params.weights()}


def joint_loss(bce: float, triplet: float, alpha: float, weight_decay: float,
               params: ParameterSet | float) -> float:
    """bce + alpha * triplet + weight_decay * ||W||^2.

    ``params`` may be a precomputed squared weight norm.
    """
    for v in (bce, triplet):
        if not np.isfinite(v):
            raise ValueError(f"non-finite loss component {v}")
    w2 = params if isinstance(params, (int, float)) else weight_penalty(params)
    return bce + alpha * triplet + weight_decay * w2
