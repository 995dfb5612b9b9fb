"""Online triplet construction inside a mini-batch.

Triplets are returned as an ``(T, 3)`` integer array of
``(anchor, positive, negative)`` batch indices, anchors in increasing order.
Every sample is tried as anchor once; anchors without a same-class partner
are skipped.

Distance-weighted sampling draws positives with probability proportional to
the chord-length density ``q(d)`` of uniformly distributed points on the unit
sphere in ``D`` dimensions, and negatives among those with chord length below
``sqrt(2)`` with probability proportional to ``min(beta, 1 / q(d))``. With the
normalized density the peak of ``q`` is roughly ``sqrt(D / pi)``, so
``1 / q >= 0.157`` everywhere for ``D = 128``; with ``beta = 0.1`` the cap
binds for every distance and negative sampling reduces to uniform sampling
over the eligible set.

An anchor whose negatives all lie at or beyond ``sqrt(2)`` has nothing to
draw from. By default it is skipped (and counted); ``fallback="uniform"``
instead draws uniformly over all opposite-class samples.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

log = logging.getLogger(__name__)

STRATEGIES = ("RS", "BHS", "DWS")
FALLBACKS = ("skip", "uniform")
SQRT2 = float(np.sqrt(2.0))


@dataclass
class SamplingConfig:
    strategy: str = "DWS"
    beta: float = 0.1
    # ablation switches for distance-weighted sampling
    uniform_positives: bool = False
    normalized_density: bool = True
    # what to do for an anchor without a negative closer than sqrt(2)
    fallback: str = "skip"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"unknown fallback {self.fallback!r}, expected one of {FALLBACKS}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class DistanceMatrix:
    squared: np.ndarray
    chord: np.ndarray


@dataclass
class MiningDiagnostics:
    counts: Counter = field(default_factory=Counter)

    def note(self, key: str, n: int = 1) -> None:
        self.counts[key] += n


def _diag(diagnostics, key, n=1):
    if diagnostics is not None:
        diagnostics.note(key, n)


def pairwise_distances(embeddings: np.ndarray, tol: float = 1e-3) -> DistanceMatrix:
    """Squared and plain Euclidean distances between unit embeddings."""
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    bad = np.abs(norms - 1.0) > tol
    if bad.any():
        raise ValueError(f"embeddings must be unit-norm; rows {np.flatnonzero(bad)[:5].tolist()} are not")
    sq = np.clip(2.0 - 2.0 * (e @ e.T), 0.0, 4.0)
    sq = 0.5 * (sq + sq.T)
    np.fill_diagonal(sq, 0.0)
    return DistanceMatrix(squared=sq, chord=np.sqrt(sq))


def _masks(labels):
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    return pos, ~same


def _single_class(labels, diagnostics) -> bool:
    if len(np.unique(labels)) < 2:
        log.warning("single-class batch; no triplets mined")
        _diag(diagnostics, "single_class_batch")
        return True
    return False


def _as_triplets(rows) -> np.ndarray:
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def mine_random(labels, rng: np.random.Generator, diagnostics: MiningDiagnostics | None = None) -> np.ndarray:
    """Uniform positive and uniform negative per anchor."""
    labels = np.asarray(labels)
    if _single_class(labels, diagnostics):
        return _as_triplets([])
    pos, neg = _masks(labels)
    rows = []
    for a in range(len(labels)):
        ps = np.flatnonzero(pos[a])
        if len(ps) == 0:
            _diag(diagnostics, "anchor_without_positive")
            continue
        ns = np.flatnonzero(neg[a])
        rows.append((a, ps[rng.integers(len(ps))], ns[rng.integers(len(ns))]))
    return _as_triplets(rows)


def mine_batch_hard(labels, distances: DistanceMatrix, diagnostics: MiningDiagnostics | None = None) -> np.ndarray:
    """Furthest positive and closest negative per anchor; ties go to the lowest index."""
    labels = np.asarray(labels)
    if _single_class(labels, diagnostics):
        return _as_triplets([])
    pos, neg = _masks(labels)
    d = distances.squared
    hardest_pos = np.argmax(np.where(pos, d, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(neg, d, np.inf), axis=1)
    has_pos = pos.any(axis=1)
    _diag(diagnostics, "anchor_without_positive", int((~has_pos).sum()))
    anchors = np.flatnonzero(has_pos)
    return np.stack([anchors, hardest_pos[anchors], hardest_neg[anchors]], axis=1).astype(np.int64)


# ------------------------------------------------------- sphere distance density


def log_density_kernel(d, dim: int) -> np.ndarray:
    """log of d^(D-2) * (1 - d^2/4)^((D-3)/2); -inf where the kernel vanishes."""
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (dim - 2) * np.log(d)
        if dim > 3:
            # for dim == 3 the second factor is (.)^0 == 1, even at d = 2
            out = out + 0.5 * (dim - 3) * np.log1p(-0.25 * d * d)
    return np.where(np.isnan(out), -np.inf, out)


def density_mode(dim: int) -> float:
    """Maximizer of the chord-length kernel."""
    if dim == 3:
        return 2.0
    return float(2.0 * np.sqrt((dim - 2) / (2.0 * dim - 5)))


@lru_cache(maxsize=None)
def log_normalizer(dim: int) -> float:
    """log of the kernel's integral over [0, 2] by adaptive quadrature."""
    if dim < 3:
        raise ValueError("density needs dim >= 3")
    mode = density_mode(dim)
    peak = float(log_density_kernel(mode, dim))
    f = lambda d: float(np.exp(log_density_kernel(d, dim) - peak))
    points = [mode] if 0 < mode < 2 else None
    val, _ = integrate.quad(f, 0.0, 2.0, points=points, epsabs=0.0, epsrel=1e-10, limit=200)
    return peak + float(np.log(val))


def log_q(d, dim: int, normalized: bool = True) -> np.ndarray:
    lk = log_density_kernel(d, dim)
    return lk - log_normalizer(dim) if normalized else lk


def q_density(d, dim: int, normalized: bool = True):
    """Chord-length density of two uniform points on the unit sphere in R^dim."""
    arr = np.asarray(d, dtype=np.float64)
    if np.any((arr < 0) | (arr > 2)) or np.any(np.isnan(arr)):
        raise ValueError("distance must lie in [0, 2]")
    if dim < 3:
        raise ValueError("density needs dim >= 3")
    out = np.exp(log_q(arr, dim, normalized))
    return float(out) if np.ndim(out) == 0 else out


def negative_weights(chord_row, neg_mask_row, beta: float, dim: int, normalized: bool = True) -> np.ndarray:
    """Unnormalized negative selection weights for one anchor: min(beta, 1/q)
    for eligible negatives (d < sqrt(2)), zero elsewhere."""
    d = np.clip(chord_row, 0.0, 2.0)
    with np.errstate(over="ignore"):
        inv_q = np.exp(-log_q(d, dim, normalized))
    w = np.minimum(beta, inv_q)
    return np.where(neg_mask_row & (chord_row < SQRT2), w, 0.0)


def positive_weights(chord_row, pos_mask_row, dim: int, normalized: bool = True) -> np.ndarray:
    d = np.clip(chord_row, 0.0, 2.0)
    return np.where(pos_mask_row, np.exp(log_q(d, dim, normalized)), 0.0)


def _draw_rows(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row: first index whose cumulative weight exceeds
    ``u * total``."""
    c = np.cumsum(weights, axis=1)
    idx = np.sum(c <= (u * c[:, -1])[:, None], axis=1)
    return np.minimum(idx, weights.shape[1] - 1)


def mine_distance_weighted(labels, distances: DistanceMatrix, beta: float, dim: int, rng: np.random.Generator,
                           diagnostics: MiningDiagnostics | None = None, uniform_positives: bool = False,
                           normalized: bool = True, fallback: str = "skip") -> np.ndarray:
    labels = np.asarray(labels)
    if _single_class(labels, diagnostics):
        return _as_triplets([])
    pos, neg = _masks(labels)
    has_pos = pos.any(axis=1)
    _diag(diagnostics, "anchor_without_positive", int((~has_pos).sum()))
    anchors = np.flatnonzero(has_pos)
    chord = distances.chord[anchors]
    pos, neg = pos[anchors], neg[anchors]
    nw = negative_weights(chord, neg, beta, dim, normalized)
    bad = ~(nw.sum(axis=1) > 0)
    if bad.any():
        if fallback == "uniform":
            _diag(diagnostics, "negative_fallback_uniform", int(bad.sum()))
            nw[bad] = neg[bad]
        else:
            _diag(diagnostics, "negative_none_eligible", int(bad.sum()))
            anchors, chord, pos, neg, nw = anchors[~bad], chord[~bad], pos[~bad], neg[~bad], nw[~bad]
    if len(anchors) == 0:
        return _as_triplets([])
    pw = pos.astype(float) if uniform_positives else positive_weights(chord, pos, dim, normalized)
    low = ~(pw.sum(axis=1) > 0)
    if low.any():
        _diag(diagnostics, "positive_fallback_uniform", int(low.sum()))
        pw[low] = pos[low]
    # one (positive, negative) uniform pair per anchor, in anchor order
    u = rng.random((len(anchors), 2))
    return np.stack([anchors, _draw_rows(pw, u[:, 0]), _draw_rows(nw, u[:, 1])], axis=1).astype(np.int64)


def mine(config: SamplingConfig, labels, embeddings: np.ndarray, rng: np.random.Generator,
         diagnostics: MiningDiagnostics | None = None) -> np.ndarray:
    if config.strategy == "RS":
        return mine_random(labels, rng, diagnostics)
    dm = pairwise_distances(embeddings)
    if config.strategy == "BHS":
        return mine_batch_hard(labels, dm, diagnostics)
    return mine_distance_weighted(labels, dm, config.beta, embeddings.shape[1], rng, diagnostics,
                                  uniform_positives=config.uniform_positives,
                                  normalized=config.normalized_density, fallback=config.fallback)
