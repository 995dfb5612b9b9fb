"""Pre-activation wide residual network with an embedding head and a binary
classification head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor_core import (BatchNorm, Conv2d, Dense, GlobalAvgPool, L2Normalize, ParameterSet, ReLU,
                          residual_add)


@dataclass
class BackboneConfig:
    depth: int = 10
    base_filters: int = 8
    widening: int = 1
    embedding_dim: int = 32
    patch_side: int = 24
    # softmax head reads the pooled features before (False) or after (True) L2 normalization
    head_on_normalized: bool = False

    def __post_init__(self):
        if self.depth < 10 or (self.depth - 4) % 6:
            raise ValueError(f"depth must satisfy depth = 4 (mod 6) and >= 10, got {self.depth}")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.patch_side < 4:
            raise ValueError("patch_side must be >= 4")

    @property
    def blocks_per_group(self) -> int:
        return (self.depth - 4) // 6

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_PRESET = dict(depth=40, base_filters=16, widening=2, embedding_dim=128, patch_side=72)
DESK_PRESET = dict(depth=10, base_filters=8, widening=1, embedding_dim=32, patch_side=24)


def preset(name: str, **overrides) -> BackboneConfig:
    base = {"paper": PAPER_PRESET, "desk": DESK_PRESET}[name]
    return BackboneConfig(**{**base, **overrides})


class _Block:
    """BN-ReLU-conv3x3-BN-ReLU-conv3x3 with identity or 1x1 projection shortcut."""

    def __init__(self, name, in_ch, out_ch, stride):
        self.bn1 = BatchNorm(f"{name}.bn1", in_ch)
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride)
        self.bn2 = BatchNorm(f"{name}.bn2", out_ch)
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, 1)
        self.relu = ReLU()
        self.proj = None
        if in_ch != out_ch or stride != 1:
            self.proj = Conv2d(f"{name}.proj", in_ch, out_ch, 1, stride, pad=0)

    def layers(self):
        return [l for l in (self.bn1, self.conv1, self.bn2, self.conv2, self.proj) if l is not None]

    def forward(self, params, x, train, updates, trace):
        h, b_bn1 = self.bn1.forward(params, x, train, updates)
        if trace is not None:
            trace.append(h)
        a, b_r1 = self.relu.forward(params, h)
        h, b_c1 = self.conv1.forward(params, a)
        h, b_bn2 = self.bn2.forward(params, h, train, updates)
        if trace is not None:
            trace.append(h)
        h, b_r2 = self.relu.forward(params, h)
        h, b_c2 = self.conv2.forward(params, h)
        if self.proj is not None:
            # shortcut taps the pre-activated input, as in the original WRN
            s, b_p = self.proj.forward(params, a)
        else:
            s, b_p = x, None
        y, b_add = residual_add(h, s)

        def backward(dy):
            grads = {}
            dh, ds = b_add(dy)
            dh, g = b_c2(dh); grads.update(g)
            dh, _ = b_r2(dh)
            dh, g = b_bn2(dh); grads.update(g)
            da, g = b_c1(dh); grads.update(g)
            if b_p is not None:
                dsa, g = b_p(ds); grads.update(g)
                da = da + dsa
                dx_short = 0
            else:
                dx_short = ds
            dh, _ = b_r1(da)
            dx, g = b_bn1(dh); grads.update(g)
            return dx + dx_short, grads

        return y, backward


class WideResNet:
    """Trunk -> BN-ReLU -> 1x1 conv -> GAP -> (L2 norm -> embedding, dense -> softmax)."""

    def __init__(self, config: BackboneConfig):
        self.config = c = config
        k = c.widening
        widths = [c.base_filters * k, 2 * c.base_filters * k, 4 * c.base_filters * k]
        self.stem = Conv2d("stem", 3, c.base_filters, 3, 1)
        self.blocks = []
        in_ch = c.base_filters
        for g, width in enumerate(widths):
            for i in range(c.blocks_per_group):
                stride = 2 if (g > 0 and i == 0) else 1
                self.blocks.append(_Block(f"g{g}b{i}", in_ch, width, stride))
                in_ch = width
        self.bn_out = BatchNorm("bn_out", in_ch)
        self.relu = ReLU()
        self.head_conv = Conv2d("embed_conv", in_ch, c.embedding_dim, 1, 1, pad=0, bias=True)
        self.gap = GlobalAvgPool()
        self.norm = L2Normalize()
        self.classifier = Dense("cls", c.embedding_dim, 2)

    def layers(self):
        out = [self.stem]
        for b in self.blocks:
            out.extend(b.layers())
        return out + [self.bn_out, self.head_conv, self.classifier]

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> ParameterSet:
        params = ParameterSet()
        for layer in self.layers():
            layer.init(params, rng, dtype)
        return params

    def _check_input(self, x):
        s = self.config.patch_side
        if x.ndim != 4 or x.shape[1:] != (s, s, 3):
            raise ValueError(f"expected patches of shape (N, {s}, {s}, 3), got {x.shape}")

    def forward(self, params: ParameterSet, x: np.ndarray, train: bool = False,
                updates: dict | None = None, trace: list | None = None, grad: bool = True):
        """Returns ``(out, backward)`` with ``out`` holding ``features``,
        ``embedding``, ``logits`` and ``prob`` (mitosis probability).

        ``backward(d_embedding, d_logits)`` returns parameter gradients; either
        upstream gradient may be None. With ``grad=False`` intermediate buffers
        are released block by block and ``backward`` is None.
        """
        self._check_input(x)
        h, b_stem = self.stem.forward(params, x)
        back = []
        for blk in self.blocks:
            h, b = blk.forward(params, h, train, updates, trace)
            if grad:
                back.append(b)
        h, b_bn = self.bn_out.forward(params, h, train, updates)
        if trace is not None:
            trace.append(h)
        h, b_relu = self.relu.forward(params, h)
        h, b_hc = self.head_conv.forward(params, h)
        feats, b_gap = self.gap.forward(params, h)
        emb, b_norm = self.norm.forward(params, feats)
        head_in = emb if self.config.head_on_normalized else feats
        logits, b_cls = self.classifier.forward(params, head_in)
        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        prob = ez[:, 1] / ez.sum(axis=1)
        out = {"features": feats, "embedding": emb, "logits": logits, "prob": prob}
        if not grad:
            return out, None

        def backward(d_embedding=None, d_logits=None):
            grads = {}
            d_feats = np.zeros_like(feats)
            d_emb = np.zeros_like(emb) if d_embedding is None else d_embedding
            if d_logits is not None:
                d_head, g = b_cls(d_logits)
                grads.update(g)
                if self.config.head_on_normalized:
                    d_emb = d_emb + d_head
                else:
                    d_feats = d_feats + d_head
            else:
                grads.update({k: np.zeros_like(params[k]) for k in ("cls.w", "cls.b")})
            d_n, _ = b_norm(d_emb)
            d_feats = d_feats + d_n
            dh, _ = b_gap(d_feats)
            dh, g = b_hc(dh); grads.update(g)
            dh, _ = b_relu(dh)
            dh, g = b_bn(dh); grads.update(g)
            for b in reversed(back):
                dh, g = b(dh); grads.update(g)
            _, g = b_stem(dh); grads.update(g)
            return grads

        return out, backward

    def embed(self, params, patches) -> np.ndarray:
        """Unit-norm embeddings in inference mode."""
        return self.forward(params, _as_batch(patches, params), grad=False)[0]["embedding"]

    def classify(self, params, patches) -> np.ndarray:
        """Mitosis probabilities in inference mode."""
        return self.forward(params, _as_batch(patches, params), grad=False)[0]["prob"]

    def inference_batch(self, budget_bytes: int = 2 ** 28) -> int:
        """Patches per chunk so the widest im2col buffer stays near ``budget_bytes``."""
        c = self.config
        per_patch = c.patch_side ** 2 * 9 * c.base_filters * c.widening * 4
        return int(np.clip(budget_bytes // per_patch, 1, 256))

    def predict_proba(self, params, patches, batch_size: int | None = None) -> np.ndarray:
        patches = np.asarray(patches)
        if len(patches) == 0:
            return np.zeros(0)
        batch_size = batch_size or self.inference_batch()
        return np.concatenate([self.classify(params, patches[i:i + batch_size])
                               for i in range(0, len(patches), batch_size)])


def to_input(patches: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 RGB patches -> centered floats in [-0.5, 0.5]."""
    patches = np.asarray(patches)
    if patches.dtype == np.uint8:
        return (patches.astype(dtype) / 255.0 - 0.5).astype(dtype)
    return patches.astype(dtype)


def _as_batch(patches, params) -> np.ndarray:
    dtype = next(iter(params.values.values())).dtype
    x = to_input(patches, dtype)
    return x[None] if x.ndim == 3 else x

