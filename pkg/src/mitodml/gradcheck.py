"""Central finite-difference checks of the joint-loss gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import WideResNet
from .losses import PROB_EPS, bce_logit_grad, bce_loss, triplet_loss_and_grad, weight_penalty, weight_penalty_grads
from .tensor_core import ParameterSet

KINK_EXCLUSION = 1e-6


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _evaluate(net, params, x, labels, triplets, alpha, margin, weight_decay):
    """Objective value plus the activation pattern of every non-smooth piece:
    ReLU input signs, active triplet hinges and clamped probabilities."""
    trace: list = []
    out, _ = net.forward(params, x, train=True, trace=trace)
    emb = out["embedding"]
    trip, _ = triplet_loss_and_grad(emb, triplets, margin)
    value = bce_loss(out["prob"], labels) + alpha * trip + weight_decay * weight_penalty(params)
    hinge = np.zeros(0)
    if len(triplets):
        a, p, n = emb[triplets[:, 0]], emb[triplets[:, 1]], emb[triplets[:, 2]]
        hinge = np.sum((a - p) ** 2, axis=1) - np.sum((a - n) ** 2, axis=1) + margin
    p_true = np.where(np.asarray(labels) == 1, out["prob"], 1 - out["prob"])
    return value, trace, hinge, p_true


def joint_objective(net: WideResNet, params: ParameterSet, x, labels, triplets, alpha, margin, weight_decay,
                    trace=None) -> float:
    value, t, _, _ = _evaluate(net, params, x, labels, triplets, alpha, margin, weight_decay)
    if trace is not None:
        trace.extend(t)
    return value


def joint_gradients(net: WideResNet, params: ParameterSet, x, labels, triplets, alpha, margin,
                    weight_decay) -> dict[str, np.ndarray]:
    out, backward = net.forward(params, x, train=True)
    _, g_emb = triplet_loss_and_grad(out["embedding"], triplets, margin)
    grads = backward(alpha * g_emb, bce_logit_grad(out["prob"], labels))
    for k, g in weight_penalty_grads(params, weight_decay).items():
        grads[k] = grads[k] + g
    return grads


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


def near_kink(trace, tol: float = KINK_EXCLUSION) -> bool:
    return any(np.any(np.abs(t) < tol) for t in trace)


def _pattern(trace, hinge, p_true):
    return [t > 0 for t in trace] + [hinge > 0, p_true < PROB_EPS]


def _same(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def check_gradients(net: WideResNet, params: ParameterSet, x, labels, triplets, rng: np.random.Generator,
                    alpha=0.1, margin=0.5, weight_decay=1e-4, n_probes=100, step=1e-4,
                    names=None, max_redraws=None) -> tuple[list[Probe], int]:
    """Compare analytic and central-difference derivatives at random trainable entries.

    ``params`` should be float64. The base point must keep every ReLU input
    and hinge at least 1e-6 from its kink. A probe whose +-step interval
    changes any activation pattern straddles a kink; it is discarded and
    redrawn. Returns the probes and the number discarded.
    """
    value, trace, hinge, p_true = _evaluate(net, params, x, labels, triplets, alpha, margin, weight_decay)
    if near_kink(trace) or np.any(np.abs(hinge) < KINK_EXCLUSION):
        raise ValueError("base point lies within the kink exclusion zone; draw another input")
    base = _pattern(trace, hinge, p_true)
    grads = joint_gradients(net, params, x, labels, triplets, alpha, margin, weight_decay)
    names = list(names) if names is not None else params.trainable()
    sizes = np.array([params[n].size for n in names], dtype=float)
    max_redraws = n_probes if max_redraws is None else max_redraws
    probes: list[Probe] = []
    discarded = 0
    while len(probes) < n_probes:
        # alternate between uniform over arrays and weighted by array size
        w = np.ones(len(names)) if len(probes) % 2 else sizes
        name = names[rng.choice(len(names), p=w / w.sum())]
        arr = params.values[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        vals, ok = [], True
        for sgn in (1, -1):
            arr[idx] = orig + sgn * step
            v, t, h, pt = _evaluate(net, params, x, labels, triplets, alpha, margin, weight_decay)
            vals.append(v)
            ok = ok and _same(base, _pattern(t, h, pt))
        arr[idx] = orig
        if not ok:
            discarded += 1
            if discarded > max_redraws:
                raise RuntimeError(f"{discarded} probes straddled a kink; base point too close to one")
            continue
        numeric = (vals[0] - vals[1]) / (2 * step)
        analytic = float(grads[name][idx])
        probes.append(Probe(name, idx, analytic, numeric, relative_error(analytic, numeric)))
    return probes, discarded
