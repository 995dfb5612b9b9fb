"""Multi-patch nucleus scoring and pooled point-detection F1."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .candidates import CandidateNucleus, extract_patch

log = logging.getLogger(__name__)

MATCH_RADIUS = 30.0
PATCH_OFFSET = 7


def sample_offsets(offset: int = PATCH_OFFSET) -> np.ndarray:
    """Center plus a cross of four shifts, as (dx, dy)."""
    return np.array([(0, 0), (offset, 0), (-offset, 0), (0, offset), (0, -offset)])


def _shifted_centers(image, centroid, offset):
    h, w = image.shape[:2]
    x, y = centroid
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise ValueError(f"centroid {centroid} outside image of size {w}x{h}")
    pts = np.asarray(centroid, float) + sample_offsets(offset)
    # shifted samples near the border are pulled back inside; the crop is mirror-padded
    return np.clip(pts, 0, [w - 1, h - 1])


def nucleus_patches(image, centroids, side: int, offset: int = PATCH_OFFSET) -> np.ndarray:
    """(len(centroids) * 5, side, side, 3) patches, five per centroid."""
    out = [extract_patch(image, tuple(p), side) for c in centroids for p in _shifted_centers(image, c, offset)]
    if not out:
        return np.zeros((0, side, side, 3), dtype=np.asarray(image).dtype)
    return np.stack(out)


def aggregate(patch_probs) -> np.ndarray:
    """Mean over consecutive groups of five patch probabilities."""
    return np.asarray(patch_probs, dtype=np.float64).reshape(-1, 5).mean(axis=1)


def predict_nuclei(net, params, image, centroids, offset: int = PATCH_OFFSET) -> np.ndarray:
    if len(centroids) == 0:
        return np.zeros(0)
    patches = nucleus_patches(image, centroids, net.config.patch_side, offset)
    return aggregate(net.predict_proba(params, patches))


def predict_nucleus(net, params, image, centroid, offset: int = PATCH_OFFSET) -> float:
    """Mean mitosis probability over the five patches around one centroid."""
    return float(predict_nuclei(net, params, image, [centroid], offset)[0])


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def match_detections(predictions, ground_truth, radius: float = MATCH_RADIUS) -> MatchResult:
    """Greedy one-to-one matching by ascending distance (ties: prediction
    index, then ground-truth index). A pair matches iff distance <= radius."""
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    pairs = []
    if len(pred) and len(gt):
        d = np.hypot(pred[:, None, 0] - gt[None, :, 0], pred[:, None, 1] - gt[None, :, 1])
        pi, gi = np.nonzero(d <= radius)
        order = np.lexsort((gi, pi, d[pi, gi]))
        used_p, used_g = set(), set()
        for k in order:
            p, g = int(pi[k]), int(gi[k])
            if p in used_p or g in used_g:
                continue
            used_p.add(p)
            used_g.add(g)
            pairs.append((p, g, float(d[p, g])))
    tp = len(pairs)
    return MatchResult(tp, len(pred) - tp, len(gt) - tp, pairs)


def f1_score(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    if tp + fp == 0 or tp + fn == 0:
        log.info("f1: zero denominator (tp=%d fp=%d fn=%d)", tp, fp, fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def metrics(self) -> dict:
        p, r, f = f1_score(self.tp, self.fp, self.fn)
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": p, "recall": r, "f1": f}


def pooled_counts(per_image_predictions: dict, per_image_truth: dict, radius: float = MATCH_RADIUS) -> Counts:
    """Sum TP/FP/FN over all images, treating them as a single data set."""
    total = Counts()
    for image_id in sorted(set(per_image_predictions) | set(per_image_truth)):
        m = match_detections(per_image_predictions.get(image_id, []), per_image_truth.get(image_id, []), radius)
        total = total + Counts(m.tp, m.fp, m.fn)
    return total


@dataclass
class EvalImage:
    image_id: str
    rgb: np.ndarray
    candidates: list[CandidateNucleus]
    ground_truth: list[tuple[float, float]]


@dataclass
class DetectionResult:
    image_id: str
    x: float
    y: float
    prob: float
    label: int


def score_images(net, params, images: list[EvalImage], offset: int = PATCH_OFFSET) -> list[DetectionResult]:
    """Aggregated probability for every candidate of every image (label unset)."""
    side = net.config.patch_side
    chunks, owners = [], []
    for im in images:
        cents = [(c.x, c.y) for c in im.candidates]
        if cents:
            chunks.append(nucleus_patches(im.rgb, cents, side, offset))
            owners.extend((im.image_id, c.x, c.y) for c in im.candidates)
    if not owners:
        return []
    probs = aggregate(net.predict_proba(params, np.concatenate(chunks)))
    return [DetectionResult(i, x, y, float(p), -1) for (i, x, y), p in zip(owners, probs)]


def decide(results: list[DetectionResult], threshold: float = 0.5) -> list[DetectionResult]:
    return [DetectionResult(r.image_id, r.x, r.y, r.prob, int(r.prob >= threshold)) for r in results]


def detection_counts(results: list[DetectionResult], truth: dict, threshold: float = 0.5,
                     radius: float = MATCH_RADIUS) -> Counts:
    preds: dict = {k: [] for k in truth}
    for r in results:
        if r.prob >= threshold:
            preds.setdefault(r.image_id, []).append((r.x, r.y))
    return pooled_counts(preds, truth, radius)


def pr_curve(results: list[DetectionResult], truth: dict, thresholds=None, radius: float = MATCH_RADIUS) -> list[dict]:
    thresholds = np.linspace(0, 1, 21) if thresholds is None else thresholds
    rows = []
    for t in thresholds:
        m = detection_counts(results, truth, float(t), radius).metrics()
        rows.append({"threshold": float(t), **m})
    return rows


def evaluate(net, params, images: list[EvalImage], threshold: float = 0.5, radius: float = MATCH_RADIUS,
             offset: int = PATCH_OFFSET) -> tuple[dict, list[DetectionResult]]:
    results = decide(score_images(net, params, images, offset), threshold)
    truth = {im.image_id: im.ground_truth for im in images}
    return detection_counts(results, truth, threshold, radius).metrics(), results
