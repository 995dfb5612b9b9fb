"""Dataset directories, CSV tables and JSON configs on disk.

A dataset directory holds ``images/<image_id>.png``, ``annotations.csv``
(``image_id,x,y``) and optionally ``candidates.csv``
(``image_id,x,y,area``) and ``splits.json`` (``{"train": [...], "val": [...],
"test": [...]}``).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .candidates import CandidateNucleus, LabeledImage

OUT_ENV = "MITODML_OUT"


def output_root(default: str = "runs") -> Path:
    return Path(os.environ.get(OUT_ENV, default))


def write_json(obj, path) -> None:
    if is_dataclass(obj):
        obj = asdict(obj)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_png(rgb: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _cell(v):
    """Shortest round-tripping text for floats, plain ints for numpy integers."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_points(path, rows, header=("image_id", "x", "y")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def read_points(path) -> dict[str, list[tuple[float, float]]]:
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["image_id"], []).append((float(row["x"]), float(row["y"])))
    return out


def read_detections(path) -> list[dict]:
    """Rows of a detections CSV; ``prob`` defaults to 1.0 when absent."""
    with open(path, newline="") as fh:
        return [{"image_id": r["image_id"], "x": float(r["x"]), "y": float(r["y"]),
                 "prob": float(r["prob"]) if r.get("prob") not in (None, "") else 1.0}
                for r in csv.DictReader(fh)]


def write_candidates(path, candidates: dict[str, list[CandidateNucleus]]) -> None:
    write_points(path, [(i, c.x, c.y, c.area) for i in candidates for c in candidates[i]],
                 header=("image_id", "x", "y", "area"))


def read_candidates(path) -> dict[str, list[CandidateNucleus]]:
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["image_id"], []).append(CandidateNucleus(float(r["x"]), float(r["y"]), int(r["area"])))
    return out


def save_dataset(images: list[LabeledImage], root) -> None:
    root = Path(root)
    for im in images:
        write_png(im.rgb, root / "images" / f"{im.image_id}.png")
    write_points(root / "annotations.csv", [(im.image_id, x, y) for im in images for x, y in im.mitoses])
    if any(im.nuclei for im in images):
        write_points(root / "nuclei.csv", [(im.image_id, x, y, int(m)) for im in images for x, y, m in im.nuclei],
                     header=("image_id", "x", "y", "mitosis"))


def load_dataset(root, resolution_um: float = 0.25) -> list[LabeledImage]:
    root = Path(root)
    ann_path = root / "annotations.csv"
    ann = read_points(ann_path) if ann_path.exists() else {}
    images = []
    for p in sorted((root / "images").glob("*.png")):
        images.append(LabeledImage(p.stem, read_png(p), ann.get(p.stem, []), resolution_um))
    if not images:
        raise FileNotFoundError(f"no PNG images under {root / 'images'}")
    return images
