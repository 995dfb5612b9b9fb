"""Command line: synth, preprocess, train, eval, experiment, mine-bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .backbone import WideResNet
from .candidates import DetectorConfig, detect_candidates
from .evaluation import Counts, DetectionResult, decide, detection_counts, pr_curve, score_images
from .experiment import ExperimentConfig, run_experiment
from .mining import (STRATEGIES, mine_batch_hard, mine_distance_weighted, mine_random, negative_weights,
                     pairwise_distances, positive_weights)
from .synth import SynthConfig, synth_dataset
from .trainer import TrainConfig, eval_images, prepare_training_data, train

log = logging.getLogger("mitodml")


def _out(path: str | None, name: str) -> Path:
    return Path(path) if path else io.output_root() / name


def cmd_synth(args) -> int:
    cfg = SynthConfig(**(io.read_json(args.config) if args.config else {}))
    cfg.seed = args.seed
    out = _out(args.out, "synth")
    images = synth_dataset(cfg, args.n_images)
    io.save_dataset(images, out)
    io.write_json(cfg, out / "synth_config.json")
    log.info("wrote %d images (%d mitoses) to %s", len(images), sum(len(i.mitoses) for i in images), out)
    return 0


def cmd_preprocess(args) -> int:
    images = io.load_dataset(args.data)
    det = DetectorConfig(**(io.read_json(args.config) if args.config else {}))
    t0 = time.perf_counter()
    cands = {im.image_id: detect_candidates(im.rgb, det) for im in images}
    out = Path(args.out) if args.out else Path(args.data) / "candidates.csv"
    io.write_candidates(out, cands)
    log.info("%d candidates in %d images (%.2fs) -> %s", sum(map(len, cands.values())), len(images),
             time.perf_counter() - t0, out)
    return 0


def _splits(images, data_dir: Path, seed: int, val_fraction: float) -> dict[str, list]:
    path = data_dir / "splits.json"
    by_id = {im.image_id: im for im in images}
    if path.exists():
        s = io.read_json(path)
        return {k: [by_id[i] for i in s.get(k, [])] for k in ("train", "val", "test")}
    order = np.random.default_rng(seed).permutation(len(images))
    n_val = max(1, int(round(val_fraction * len(images))))
    return {"val": [images[i] for i in sorted(order[:n_val])],
            "train": [images[i] for i in sorted(order[n_val:])], "test": []}


def _write_detections(path, results: list[DetectionResult]) -> None:
    io.write_points(path, [(r.image_id, r.x, r.y, r.prob, r.label) for r in results],
                    header=("image_id", "x", "y", "prob", "label"))


def cmd_train(args) -> int:
    raw = io.read_json(args.config) if args.config else {}
    raw["seed"] = args.seed
    cfg = TrainConfig.from_dict(raw)
    data_dir = Path(args.data)
    out = _out(args.out, "train")
    images = io.load_dataset(data_dir)
    cand_path = data_dir / "candidates.csv"
    candidates = io.read_candidates(cand_path) if cand_path.exists() else None
    if candidates is not None:
        for im in images:
            candidates.setdefault(im.image_id, [])
    split = _splits(images, data_dir, args.seed, args.val_fraction)
    io.write_json(cfg, out / "config.json")
    data = prepare_training_data(split["train"], split["val"], cfg, candidates)
    result = train(cfg, data, out_dir=out,
                   callback=lambda r: log.info("epoch %3d joint %.4f val-F1 %.4f |NM| %d", r["epoch"], r["joint"],
                                               r["val_f1"], r["nm_size"]))
    net = WideResNet(cfg.backbone)
    for name in ("val", "test"):
        if split[name]:
            res = decide(score_images(net, result.params, eval_images(split[name], candidates), cfg.patch_offset),
                         cfg.decision_threshold)
            _write_detections(out / f"detections_{name}.csv", res)
    log.info("best epoch %d, validation F1 %.4f -> %s", result.best_epoch, result.best_val_f1, out)
    return 0


def cmd_eval(args) -> int:
    dets = io.read_detections(args.detections)
    truth = io.read_points(args.annotations)
    for d in dets:
        truth.setdefault(d["image_id"], [])
    results = [DetectionResult(d["image_id"], d["x"], d["y"], d["prob"], int(d["prob"] >= args.threshold))
               for d in dets]
    counts: Counts = detection_counts(results, truth, args.threshold, args.radius)
    metrics = counts.metrics()
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.pr_curve:
        rows = pr_curve(results, truth, radius=args.radius)
        keys = ("threshold", "tp", "fp", "fn", "precision", "recall", "f1")
        io.write_points(args.pr_curve, [tuple(r[k] for k in keys) for r in rows], header=keys)
    return 0


def cmd_experiment(args) -> int:
    raw = io.read_json(args.config) if args.config else {}
    cfg = ExperimentConfig(**raw)
    cfg.split_seed = args.seed
    if args.workers:
        cfg.workers = args.workers
    out = _out(args.out, "experiment")
    io.write_json(cfg, out / "config.json")
    t0 = time.perf_counter()
    _, agg = run_experiment(cfg, out)
    for a in agg:
        log.info("%-11s frac=%.2f  F1 %.4f +- %.4f (n=%d)", a["method"], a["fraction"], a["mean_f1"], a["std_f1"],
                 a["n"])
    log.info("grid finished in %.1fs -> %s", time.perf_counter() - t0, out)
    return 0


def mine_bench(batch: int, dim: int, draws: int, seed: int, beta: float = 0.1, spread: float = 0.35):
    """Selection counts per (strategy, role, candidate index) for anchor 0 of a
    fixed random batch. Returns rows and the batch's labels and distances."""
    rng = np.random.default_rng(seed)
    labels = np.arange(batch) % 2
    centers = rng.standard_normal((2, dim))
    emb = centers[labels] + spread * rng.standard_normal((batch, dim)) * np.sqrt(dim) / 4
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    dm = pairwise_distances(emb)
    counts = {s: {"positive": np.zeros(batch, int), "negative": np.zeros(batch, int)} for s in STRATEGIES}
    draw_rng = np.random.default_rng(seed + 1)
    for _ in range(draws):
        for s in STRATEGIES:
            if s == "RS":
                t = mine_random(labels, draw_rng)
            elif s == "BHS":
                t = mine_batch_hard(labels, dm)
            else:
                t = mine_distance_weighted(labels, dm, beta, dim, draw_rng)
            counts[s]["positive"][t[0, 1]] += 1
            counts[s]["negative"][t[0, 2]] += 1
    pos_mask = (labels == labels[0]) & (np.arange(batch) != 0)
    neg_mask = labels != labels[0]
    weights = {"positive": positive_weights(dm.chord[0], pos_mask, dim),
               "negative": negative_weights(dm.chord[0], neg_mask, beta, dim)}
    rows = []
    for s in STRATEGIES:
        for role in ("positive", "negative"):
            mask = pos_mask if role == "positive" else neg_mask
            for i in np.flatnonzero(mask):
                rows.append((s, role, 0, int(i), float(dm.chord[0, i]), float(weights[role][i]),
                             int(counts[s][role][i])))
    return rows, labels, dm


def cmd_mine_bench(args) -> int:
    rows, _, _ = mine_bench(args.batch, args.dim, args.draws, args.seed, args.beta)
    out = Path(args.out) if args.out else io.output_root() / "mine_bench.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_points(out, rows, header=("strategy", "role", "anchor", "index", "distance", "dws_weight", "count"))
    log.info("wrote %d rows -> %s", len(rows), out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mitodml", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic H&E dataset")
    s.add_argument("--out")
    s.add_argument("--n-images", type=int, default=48)
    s.add_argument("--config", help="SynthConfig JSON")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="detect nucleus candidates")
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="candidates CSV (default <data>/candidates.csv)")
    s.add_argument("--config", help="DetectorConfig JSON")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="pooled F1 of a detections CSV")
    s.add_argument("--detections", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", help="metrics JSON")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--radius", type=float, default=30.0)
    s.add_argument("--pr-curve", help="optional precision/recall CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", help="run the method x training-fraction grid")
    s.add_argument("--config", help="ExperimentConfig JSON")
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("mine-bench", help="triplet selection histograms")
    s.add_argument("--out")
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--draws", type=int, default=2000)
    s.add_argument("--beta", type=float, default=0.1)
    s.set_defaults(func=cmd_mine_bench)

    for sp in sub.choices.values():
        sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
