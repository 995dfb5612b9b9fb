"""Minimal differentiable layer set, He initialization, Adam and checkpoints.

Tensors are numpy arrays in NHWC layout. Every layer exposes
``forward(params, x, train=False, updates=None) -> (y, backward)`` where
``backward(dy) -> (dx, param_grads)``. Forward passes never mutate their
inputs; batch-norm running statistics computed in training mode are written
into the optional ``updates`` dict and applied by the caller.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

# parameter kinds; only "weight" entries are L2-regularized
WEIGHT, BIAS, BN_SCALE, BN_SHIFT, RUNNING = "weight", "bias", "bn_scale", "bn_shift", "running"
TRAINABLE_KINDS = (WEIGHT, BIAS, BN_SCALE, BN_SHIFT)


@dataclass
class ParameterSet:
    """Named arrays plus their kind (weight, bias, batch-norm, running stat)."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    kinds: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, kind: str) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        self.values[name] = value
        self.kinds[name] = kind

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def trainable(self) -> list[str]:
        return [k for k in self.values if self.kinds[k] in TRAINABLE_KINDS]

    def weights(self) -> list[str]:
        return [k for k in self.values if self.kinds[k] == WEIGHT]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(self.values[k]) for k in self.trainable()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.values.items()}, dict(self.kinds))

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: v.astype(dtype) for k, v in self.values.items()}, dict(self.kinds))

    def apply_updates(self, updates: dict[str, np.ndarray]) -> None:
        for k, v in updates.items():
            if self.kinds[k] != RUNNING:
                raise KeyError(f"{k!r} is not a running statistic")
            self.values[k] = v.astype(self.values[k].dtype)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values.values())


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Zero-mean normal draws with std sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _check(cond: bool, layer: str, what: str, expected, got) -> None:
    if not cond:
        raise ValueError(f"{layer}: {what} mismatch, expected {expected}, got {got}")


# ----------------------------------------------------------------- layers


class Conv2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, k: int = 3, stride: int = 1,
                 pad: int | None = None, bias: bool = False):
        self.name, self.in_ch, self.out_ch, self.k, self.stride = name, in_ch, out_ch, k, stride
        self.pad = (k // 2) if pad is None else pad
        self.bias = bias

    def init(self, params: ParameterSet, rng: np.random.Generator, dtype) -> None:
        fan_in = self.k * self.k * self.in_ch
        params.add(f"{self.name}.w", he_init((self.k, self.k, self.in_ch, self.out_ch), fan_in, rng, dtype), WEIGHT)
        if self.bias:
            params.add(f"{self.name}.b", np.zeros(self.out_ch, dtype), BIAS)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        return ho, wo

    def forward(self, params, x, train=False, updates=None):
        _check(x.ndim == 4, self.name, "input rank", 4, x.ndim)
        _check(x.shape[3] == self.in_ch, self.name, "channel dimension", self.in_ch, x.shape[3])
        w = params[f"{self.name}.w"]
        k, s, p = self.k, self.stride, self.pad
        n, h, wd, c = x.shape
        ho, wo = self.output_hw(h, wd)
        _check(ho > 0 and wo > 0, self.name, "spatial size", f">= {k - 2 * p}", (h, wd))
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else np.ascontiguousarray(x)
        st = xp.strides
        win = as_strided(xp, (n, ho, wo, k, k, c), (st[0], st[1] * s, st[2] * s, st[1], st[2], st[3]),
                         writeable=False)
        cols = win.reshape(n * ho * wo, k * k * c)
        wmat = w.reshape(k * k * c, self.out_ch)
        y = cols @ wmat
        if self.bias:
            y = y + params[f"{self.name}.b"]
        y = y.reshape(n, ho, wo, self.out_ch)

        def backward(dy):
            dy2 = dy.reshape(n * ho * wo, self.out_ch)
            grads = {f"{self.name}.w": (cols.T @ dy2).reshape(w.shape)}
            if self.bias:
                grads[f"{self.name}.b"] = dy2.sum(axis=0)
            dcols = (dy2 @ wmat.T).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros(xp.shape, dtype=dy.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, p:p + h, p:p + wd, :] if p else dxp
            return dx, grads

        return y, backward


class BatchNorm:
    def __init__(self, name: str, ch: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.name, self.ch, self.momentum, self.eps = name, ch, momentum, eps

    def init(self, params: ParameterSet, rng, dtype) -> None:
        params.add(f"{self.name}.gamma", np.ones(self.ch, dtype), BN_SCALE)
        params.add(f"{self.name}.beta", np.zeros(self.ch, dtype), BN_SHIFT)
        params.add(f"{self.name}.mean", np.zeros(self.ch, dtype), RUNNING)
        params.add(f"{self.name}.var", np.ones(self.ch, dtype), RUNNING)

    def forward(self, params, x, train=False, updates=None):
        _check(x.shape[-1] == self.ch, self.name, "channel dimension", self.ch, x.shape[-1])
        gamma, beta = params[f"{self.name}.gamma"], params[f"{self.name}.beta"]
        axes = tuple(range(x.ndim - 1))
        if not train:
            inv = 1.0 / np.sqrt(params[f"{self.name}.var"] + self.eps)
            scale = gamma * inv
            y = x * scale + (beta - params[f"{self.name}.mean"] * scale)

            def backward(dy):
                x_hat = (x - params[f"{self.name}.mean"]) * inv
                return dy * scale, {f"{self.name}.gamma": np.sum(dy * x_hat, axis=axes),
                                    f"{self.name}.beta": np.sum(dy, axis=axes)}

            return y, backward

        m = x.size // self.ch
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        y = xhat * gamma + beta
        if updates is not None:
            mom = self.momentum
            unbiased = var * m / max(m - 1, 1)
            updates[f"{self.name}.mean"] = mom * params[f"{self.name}.mean"] + (1 - mom) * mu
            updates[f"{self.name}.var"] = mom * params[f"{self.name}.var"] + (1 - mom) * unbiased

        def backward(dy):
            dgamma = np.sum(dy * xhat, axis=axes)
            dbeta = np.sum(dy, axis=axes)
            dxhat = dy * gamma
            dx = inv * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
            return dx, {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}

        return y, backward


class ReLU:
    name = "relu"

    def init(self, params, rng, dtype) -> None:
        pass

    def forward(self, params, x, train=False, updates=None):
        mask = x > 0
        y = np.where(mask, x, 0).astype(x.dtype)

        def backward(dy):
            return np.where(mask, dy, 0).astype(dy.dtype), {}

        return y, backward


class Dense:
    def __init__(self, name: str, in_dim: int, out_dim: int):
        self.name, self.in_dim, self.out_dim = name, in_dim, out_dim

    def init(self, params: ParameterSet, rng, dtype) -> None:
        params.add(f"{self.name}.w", he_init((self.in_dim, self.out_dim), self.in_dim, rng, dtype), WEIGHT)
        params.add(f"{self.name}.b", np.zeros(self.out_dim, dtype), BIAS)

    def forward(self, params, x, train=False, updates=None):
        _check(x.ndim == 2, self.name, "input rank", 2, x.ndim)
        _check(x.shape[1] == self.in_dim, self.name, "feature dimension", self.in_dim, x.shape[1])
        w = params[f"{self.name}.w"]
        y = x @ w + params[f"{self.name}.b"]

        def backward(dy):
            return dy @ w.T, {f"{self.name}.w": x.T @ dy, f"{self.name}.b": dy.sum(axis=0)}

        return y, backward


class GlobalAvgPool:
    name = "gap"

    def init(self, params, rng, dtype) -> None:
        pass

    def forward(self, params, x, train=False, updates=None):
        _check(x.ndim == 4, self.name, "input rank", 4, x.ndim)
        n, h, w, c = x.shape
        y = x.mean(axis=(1, 2))

        def backward(dy):
            return np.broadcast_to(dy[:, None, None, :] / (h * w), x.shape).copy(), {}

        return y, backward


class L2Normalize:
    """Row-wise unit normalization; rows with norm <= eps map to e_1."""

    name = "l2norm"

    def __init__(self, eps: float = NORM_EPS):
        self.eps = eps

    def init(self, params, rng, dtype) -> None:
        pass

    def forward(self, params, x, train=False, updates=None):
        _check(x.ndim == 2, self.name, "input rank", 2, x.ndim)
        norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        degenerate = norm[:, 0] <= self.eps
        safe = np.where(degenerate[:, None], 1.0, norm)
        y = x / safe
        if degenerate.any():
            log.warning("l2-normalize: %d degenerate rows replaced by first basis vector", int(degenerate.sum()))
            y[degenerate] = 0
            y[degenerate, 0] = 1

        def backward(dy):
            dx = (dy - y * np.sum(dy * y, axis=1, keepdims=True)) / safe
            dx[degenerate] = 0
            return dx, {}

        return y, backward


def residual_add(a: np.ndarray, b: np.ndarray):
    _check(a.shape == b.shape, "residual-add", "operand shape", a.shape, b.shape)

    def backward(dy):
        return dy, dy

    return a + b, backward


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    """Unit-normalize a single vector (falls back to e_1 when degenerate)."""
    v = np.asarray(v, dtype=float)
    y, _ = L2Normalize(eps).forward(None, v[None, :])
    return y[0]


LAYER_KINDS = {
    "conv2d": Conv2d,
    "batch-norm": BatchNorm,
    "relu": ReLU,
    "dense": Dense,
    "global-average-pool": GlobalAvgPool,
    "l2-normalize": L2Normalize,
}


def forward_backward(layer, params: ParameterSet | None, x: np.ndarray, train: bool = False):
    """Run one layer; returns ``(y, backward)``. ``layer`` may be a layer
    object or ``"residual-add"`` with ``x`` a pair of arrays."""
    if layer == "residual-add":
        return residual_add(*x)
    return layer.forward(params, x, train=train)


# ------------------------------------------------------------------ Adam


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterSet, **kw) -> "OptimizerState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), **kw)


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> list[str]:
    """In-place Adam update. Returns the names of arrays whose gradient was
    non-finite and therefore skipped."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    rejected = []
    for name, g in grads.items():
        p = params.values[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            rejected.append(name)
            continue
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        params.values[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    if rejected:
        log.warning("adam: non-finite gradient, skipped %s", rejected)
    return rejected


# ------------------------------------------------------------ checkpoints


def save_checkpoint(params: ParameterSet, path, step: int = 0, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` manifest and ``<path>.bin`` float32 LE payload.

    Both files are written to temporaries and renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, value in params.values.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        entries.append({"name": name, "shape": list(value.shape), "dtype": "float32",
                        "kind": params.kinds[name], "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    manifest = {"format": "mitodml-checkpoint/1", "step": int(step), "count": offset,
                "payload": path.name + ".bin", "entries": entries}
    if extra:
        manifest["extra"] = extra
    bin_path, json_path = path.with_name(path.name + ".bin"), path.with_name(path.name + ".json")
    for target, data in ((bin_path, b"".join(chunks)), (json_path, json.dumps(manifest, indent=1).encode())):
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, target)
    return json_path


def load_checkpoint(path) -> tuple[ParameterSet, dict]:
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    manifest = json.loads(path.with_name(path.name + ".json").read_text())
    flat = np.frombuffer(path.with_name(manifest["payload"]).read_bytes(), dtype="<f4")
    if flat.size != manifest["count"]:
        raise ValueError(f"payload holds {flat.size} floats, manifest says {manifest['count']}")
    params = ParameterSet()
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        params.add(e["name"], flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float32), e["kind"])
    return params, manifest
