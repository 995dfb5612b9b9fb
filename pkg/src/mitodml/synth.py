"""Synthetic H&E-like fields with planted nuclei and mitoses.

Images are composed in optical-density space from hematoxylin and eosin
concentration maps, so the stain pipeline sees plausible colors. Ordinary
nuclei are smooth ellipses; mitotic figures are darker, clumped, irregular
shapes. A fraction of ordinary nuclei are dark "mimics" so that intensity
alone does not separate the classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .candidates import EOSIN, HEMATOXYLIN, LabeledImage, od_to_rgb, stain_matrix


@dataclass
class SynthConfig:
    image_size: int = 160
    n_nuclei: tuple[int, int] = (8, 13)
    mitosis_fraction: float = 0.15
    radius: tuple[float, float] = (7.0, 9.5)
    min_separation: float = 24.0
    hema_normal: tuple[float, float] = (0.9, 1.2)
    hema_mitotic: tuple[float, float] = (1.0, 1.6)
    mimic_fraction: float = 0.25
    hema_mimic: tuple[float, float] = (1.2, 1.5)
    texture_normal: float = 0.08
    texture_mitotic: float = 0.3
    texture_mimic: float = 0.25
    # mitoses drawn as round, coarsely textured nuclei instead of clumped plates
    round_mitosis_fraction: float = 0.4
    eosin_background: float = 0.3
    noise: float = 0.03
    resolution_um: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.mitosis_fraction < 1:
            raise ValueError("mitosis_fraction must lie in (0, 1)")
        self.n_nuclei = tuple(self.n_nuclei)
        self.radius = tuple(self.radius)
        for f in ("hema_normal", "hema_mitotic", "hema_mimic"):
            setattr(self, f, tuple(getattr(self, f)))

    def to_dict(self) -> dict:
        return asdict(self)


def _place(n, size, margin, sep, rng, attempts=2000):
    pts = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > attempts:
            raise ValueError(f"cannot pack {n} nuclei with separation {sep} in a {size}px image")
        p = rng.uniform(margin, size - 1 - margin, size=2)
        if all(np.hypot(*(p - q)) >= sep for q in pts):
            pts.append(p)
    return pts


def _ellipse(shape, cx, cy, a, b, theta):
    yy, xx = np.indices(shape, dtype=np.float64)
    dx, dy = xx - cx, yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    return u * u + v * v


def _normal_nucleus(shape, c, r, rng):
    a = r * rng.uniform(0.95, 1.15)
    b = r * rng.uniform(0.8, 1.0)
    q = _ellipse(shape, c[0], c[1], a, b, rng.uniform(0, np.pi))
    return np.clip(1.3 - 0.3 * q, 0, 1) * (q <= 1)


def _mitotic_figure(shape, c, r, rng):
    # elongated chromosome plate plus a few clumps, with ragged outline
    theta = rng.uniform(0, np.pi)
    q = _ellipse(shape, c[0], c[1], r * rng.uniform(1.1, 1.35), r * rng.uniform(0.65, 0.85), theta)
    mask = (q <= 1).astype(float)
    for _ in range(rng.integers(3, 6)):
        ang = rng.uniform(0, 2 * np.pi)
        d = r * rng.uniform(0.5, 0.9)
        cq = _ellipse(shape, c[0] + d * np.cos(ang), c[1] + d * np.sin(ang), r * 0.4, r * 0.35, ang)
        mask = np.maximum(mask, (cq <= 1).astype(float))
    return mask


def synth_image(config: SynthConfig, rng: np.random.Generator, image_id: str = "img") -> LabeledImage:
    c = config
    s = c.image_size
    shape = (s, s)
    n = int(rng.integers(c.n_nuclei[0], c.n_nuclei[1] + 1))
    centers = _place(n, s, margin=c.radius[1] + 2, sep=c.min_separation, rng=rng)
    n_mit = int(rng.binomial(n, c.mitosis_fraction))
    is_mit = np.zeros(n, bool)
    is_mit[rng.choice(n, size=n_mit, replace=False)] = True

    eosin = c.eosin_background * (1 + 0.25 * ndimage.gaussian_filter(rng.standard_normal(shape), 6) * 6)
    hema = np.full(shape, 0.06)
    annotations, planted = [], []
    for center, mit in zip(centers, is_mit):
        r = rng.uniform(*c.radius)
        fine = ndimage.gaussian_filter(rng.standard_normal(shape), 0.8) * 2.5
        coarse = ndimage.gaussian_filter(rng.standard_normal(shape), 1.6) * 4.5
        if mit:
            if rng.random() < c.round_mitosis_fraction:
                mask = (_normal_nucleus(shape, center, r, rng) > 0).astype(float)
            else:
                mask = _mitotic_figure(shape, center, r, rng)
            level = rng.uniform(*c.hema_mitotic)
            tex = c.texture_mitotic
        else:
            mask = _normal_nucleus(shape, center, r, rng)
            mimic = rng.random() < c.mimic_fraction
            level = rng.uniform(*(c.hema_mimic if mimic else c.hema_normal))
            tex = c.texture_mimic if mimic else c.texture_normal
        grain = coarse if mit else fine
        body = mask * level * np.clip(1 + tex * grain, 0.2, None)
        hema = np.maximum(hema, body)
        eosin = np.where(mask > 0, eosin * 0.5, eosin)
        yy, xx = np.nonzero(mask > 0)
        planted.append((float(xx.mean()), float(yy.mean()), bool(mit)))
        if mit:
            annotations.append(planted[-1][:2])
    hema = ndimage.gaussian_filter(hema, 0.6)
    conc = np.stack([hema, np.clip(eosin, 0.05, None), np.zeros(shape)], axis=-1)
    od = conc @ stain_matrix(HEMATOXYLIN, EOSIN) + c.noise * rng.standard_normal(shape + (3,))
    return LabeledImage(image_id, od_to_rgb(np.clip(od, 0, None)), annotations, c.resolution_um, planted)


def synth_dataset(config: SynthConfig, n_images: int, rng: np.random.Generator | None = None) -> list[LabeledImage]:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    return [synth_image(config, rng, f"img{i:03d}") for i in range(n_images)]

