"""Nucleus candidate detection on H&E images.

stain normalization -> blue ratio -> grayscale opening -> Otsu -> 8-connected
components with area > 100 px. Coordinates are ``(x, y) = (column, row)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

HEMATOXYLIN = (0.65, 0.70, 0.29)
EOSIN = (0.07, 0.99, 0.11)
# 99th-percentile stain concentrations of the reference slide
REFERENCE_MAX_CONC = (1.9705, 1.0308)
MIN_AREA = 100


def stain_matrix(hematoxylin=HEMATOXYLIN, eosin=EOSIN) -> np.ndarray:
    """Rows: unit OD vectors of hematoxylin, eosin and their cross product."""
    h = np.asarray(hematoxylin, float)
    e = np.asarray(eosin, float)
    h, e = h / np.linalg.norm(h), e / np.linalg.norm(e)
    r = np.cross(h, e)
    return np.stack([h, e, r / np.linalg.norm(r)])


def rgb_to_od(rgb) -> np.ndarray:
    return -np.log((np.asarray(rgb, dtype=np.float64) + 1.0) / 256.0)


def od_to_rgb(od) -> np.ndarray:
    return np.clip(np.round(256.0 * np.exp(-od) - 1.0), 0, 255).astype(np.uint8)


def deconvolve(rgb, matrix: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel stain concentrations (H, E, residual), shape (..., 3)."""
    m = stain_matrix() if matrix is None else matrix
    return rgb_to_od(rgb) @ np.linalg.inv(m)


def recompose(conc, matrix: np.ndarray | None = None) -> np.ndarray:
    m = stain_matrix() if matrix is None else matrix
    return od_to_rgb(conc @ m)


def stain_normalize(rgb, matrix: np.ndarray | None = None, reference=REFERENCE_MAX_CONC,
                    percentile: float = 99.0) -> np.ndarray:
    """Rescale H and E concentrations so their 99th percentiles match the reference."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an RGB image (H, W, 3), got shape {rgb.shape}")
    conc = deconvolve(rgb, matrix)
    flat = conc.reshape(-1, 3)
    for c, ref in enumerate(reference):
        hi = np.percentile(flat[:, c], percentile)
        if hi > 1e-6:
            conc[..., c] *= ref / hi
    return recompose(conc, matrix)


def blue_ratio(rgb) -> np.ndarray:
    """Blue-ratio transform rescaled to [0, 1] by the image maximum."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    br = (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b))
    top = br.max() if br.size else 0.0
    return br / top if top > 0 else np.zeros_like(br)


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return xx * xx + yy * yy <= radius * radius


def morphological_open(image, radius: int = 2) -> np.ndarray:
    """Erosion then dilation with a disk; binary input stays binary."""
    image = np.asarray(image)
    fp = disk(radius)
    if image.dtype == bool:
        return ndimage.binary_opening(image, structure=fp, border_value=0)
    return ndimage.grey_opening(image, footprint=fp, mode="reflect")


def to_levels(gray) -> np.ndarray:
    """Map a [0, 1] float image (or uint8) onto 256 integer levels."""
    gray = np.asarray(gray)
    if gray.dtype == np.uint8:
        return gray
    return np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)


def otsu_threshold(gray) -> int:
    """Level t maximizing between-class variance of {< t} vs {>= t}.

    Lowest maximizing level on ties. A constant image returns its value.
    """
    levels = to_levels(gray)
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    if np.count_nonzero(hist) <= 1:
        value = int(levels.flat[0]) if levels.size else 0
        log.warning("otsu: constant image (level %d), no foreground", value)
        return value
    idx = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)[:-1]  # pixels below t for t = 1..255
    s0 = np.cumsum(hist * idx)[:-1]
    w1 = total - w0
    mu0 = np.divide(s0, w0, out=np.zeros_like(s0), where=w0 > 0)
    mu1 = np.divide(s0[-1] + hist[-1] * 255 - s0, w1, out=np.zeros_like(s0), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return int(np.argmax(between)) + 1


def otsu_foreground(gray) -> np.ndarray:
    levels = to_levels(gray)
    if levels.size == 0 or levels.min() == levels.max():
        return np.zeros(levels.shape, dtype=bool)
    return levels >= otsu_threshold(levels)


@dataclass
class Component:
    area: int
    x: float
    y: float
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)


def connected_components(binary, min_area: int = MIN_AREA) -> list[Component]:
    """8-connected components with area > min_area, ordered by label (raster scan)."""
    binary = np.asarray(binary, dtype=bool)
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, idx)
    rows, cols = np.indices(labels.shape)
    sum_r = ndimage.sum_labels(rows, labels, idx)
    sum_c = ndimage.sum_labels(cols, labels, idx)
    slices = ndimage.find_objects(labels)
    out = []
    for i in range(n):
        if areas[i] > min_area:
            sl = slices[i]
            out.append(Component(int(areas[i]), sum_c[i] / areas[i], sum_r[i] / areas[i],
                                 (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)))
    return out


@dataclass
class CandidateNucleus:
    x: float
    y: float
    area: int
    prob: float | None = None


@dataclass
class DetectorConfig:
    open_radius: int = 2
    min_area: int = MIN_AREA
    normalize_stain: bool = True
    hematoxylin: tuple = HEMATOXYLIN
    eosin: tuple = EOSIN


def detect_candidates(rgb, config: DetectorConfig | None = None) -> list[CandidateNucleus]:
    c = config or DetectorConfig()
    img = np.asarray(rgb)
    if c.normalize_stain:
        img = stain_normalize(img, stain_matrix(c.hematoxylin, c.eosin))
    br = blue_ratio(img)
    opened = morphological_open(to_levels(br), c.open_radius)
    mask = otsu_foreground(opened)
    return [CandidateNucleus(comp.x, comp.y, comp.area) for comp in connected_components(mask, c.min_area)]


def extract_patch(image, center, side: int = 72) -> np.ndarray:
    """side x side crop centered on (x, y); outside pixels are mirror-reflected."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    x, y = center
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise ValueError(f"center {center} outside image of size {w}x{h}")
    cx, cy = int(round(x)), int(round(y))
    r0, c0 = cy - side // 2, cx - side // 2
    r1, c1 = r0 + side, c0 + side
    if r0 >= 0 and c0 >= 0 and r1 <= h and c1 <= w:
        return image[r0:r1, c0:c1].copy()
    pad = [(max(0, -r0), max(0, r1 - h)), (max(0, -c0), max(0, c1 - w))] + [(0, 0)] * (image.ndim - 2)
    padded = np.pad(image, pad, mode="reflect")
    r0 += pad[0][0]
    c0 += pad[1][0]
    return padded[r0:r0 + side, c0:c0 + side].copy()


@dataclass
class LabeledImage:
    image_id: str
    rgb: np.ndarray
    mitoses: list[tuple[float, float]] = field(default_factory=list)
    resolution_um: float = 0.25
    # every planted nucleus (x, y, is_mitosis); known only for synthetic data
    nuclei: list[tuple[float, float, bool]] = field(default_factory=list)

    def __post_init__(self):
        h, w = self.rgb.shape[:2]
        for x, y in self.mitoses:
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"annotation ({x}, {y}) outside {self.image_id} ({w}x{h})")
