"""Training-fraction experiment grid on a synthetic benchmark."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .backbone import WideResNet
from .candidates import DetectorConfig, LabeledImage, detect_candidates
from .evaluation import evaluate
from .synth import SynthConfig, synth_dataset
from .trainer import METHODS, TrainConfig, eval_images, prepare_training_data, train

log = logging.getLogger(__name__)


def split_fraction(dataset: list, fraction: float, seed: int) -> list:
    """Image-level random subset of ceil(fraction * N) items.

    The permutation depends only on ``seed`` and ``len(dataset)``, so smaller
    fractions are prefixes of (hence contained in) larger ones.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = math.ceil(round(fraction * len(dataset), 9))
    if n == 0:
        raise ValueError("fraction selects no images")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [dataset[i] for i in sorted(order[:n])]


@dataclass
class ExperimentGrid:
    methods: tuple = tuple(METHODS)
    fractions: tuple = (0.125, 0.25, 0.5, 1.0)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        self.methods, self.fractions, self.seeds = tuple(self.methods), tuple(self.fractions), tuple(self.seeds)
        if not self.seeds:
            raise ValueError("need at least one seed")
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ValueError(f"fraction {f} outside (0, 1]")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")


def _default_train() -> TrainConfig:
    return TrainConfig(alpha=0.5, margin=0.5, initial_nm_ratio=2.0, match_radius=15.0, patch_offset=3,
                       max_epochs=50, steps_per_epoch=8, patience=20)


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    n_images: int = 48
    n_test: int = 16
    n_val: int = 8
    split_seed: int = 0
    grid: ExperimentGrid = field(default_factory=ExperimentGrid)
    train: TrainConfig = field(default_factory=_default_train)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = SynthConfig(**self.synth)
        if isinstance(self.grid, dict):
            self.grid = ExperimentGrid(**self.grid)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        if self.n_test + self.n_val >= self.n_images:
            raise ValueError("no training images left after test/validation split")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Benchmark:
    train_pool: list[LabeledImage]
    val: list[LabeledImage]
    test: list[LabeledImage]
    candidates: dict


def build_benchmark(config: ExperimentConfig) -> Benchmark:
    images = synth_dataset(config.synth, config.n_images)
    order = np.random.default_rng(config.split_seed).permutation(len(images))
    test = [images[i] for i in sorted(order[:config.n_test])]
    val = [images[i] for i in sorted(order[config.n_test:config.n_test + config.n_val])]
    pool = [images[i] for i in sorted(order[config.n_test + config.n_val:])]
    candidates = {im.image_id: detect_candidates(im.rgb, config.detector) for im in images}
    return Benchmark(pool, val, test, candidates)


_BENCH: Benchmark | None = None


def _init_worker(bench):
    global _BENCH
    _BENCH = bench


def run_cell(config: ExperimentConfig, method: str, fraction: float, seed: int,
             bench: Benchmark | None = None) -> dict:
    bench = bench or _BENCH
    tc = TrainConfig(**{**asdict(config.train), "method": method, "seed": seed})
    t0 = time.perf_counter()
    try:
        with threadpool_limits(1):
            train_imgs = split_fraction(bench.train_pool, fraction, config.split_seed)
            data = prepare_training_data(train_imgs, bench.val, tc, bench.candidates)
            result = train(tc, data)
            net = WideResNet(tc.backbone)
            metrics, _ = evaluate(net, result.params, eval_images(bench.test, bench.candidates),
                                  tc.decision_threshold, tc.match_radius, tc.patch_offset)
        # a diverged run counts as a failed cell even though a checkpoint exists
        f1, status = (float("nan"), "failed: non-finite loss") if result.aborted else (metrics["f1"], "ok")
    except Exception as exc:  # a failed cell must not stop the grid
        log.exception("cell %s/%s/%s failed", method, fraction, seed)
        f1, status = float("nan"), f"failed: {exc}"
    log.info("cell %-11s frac=%.2f seed=%d f1=%.4f (%.1fs)", method, fraction, seed, f1,
             time.perf_counter() - t0)
    return {"method": method, "fraction": fraction, "seed": seed, "f1": f1, "status": status}


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Per (method, fraction): mean and sample std of F1 over successful seeds."""
    out = []
    keys = []
    for r in rows:
        k = (r["method"], r["fraction"])
        if k not in keys:
            keys.append(k)
    for method, fraction in keys:
        f1s = [r["f1"] for r in rows if r["method"] == method and r["fraction"] == fraction
               and not math.isnan(r["f1"])]
        mean = float(np.mean(f1s)) if f1s else float("nan")
        std = float(np.std(f1s, ddof=1)) if len(f1s) > 1 else 0.0 if f1s else float("nan")
        out.append({"method": method, "fraction": fraction, "mean_f1": mean, "std_f1": std, "n": len(f1s)})
    return out


def run_experiment(config: ExperimentConfig, out_dir=None, bench: Benchmark | None = None) -> tuple[list, list]:
    bench = bench or build_benchmark(config)
    g = config.grid
    cells = [(m, f, s) for m in g.methods for f in g.fractions for s in g.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(bench,)) as ex:
            futures = [ex.submit(run_cell, config, *c) for c in cells]
            rows = [f.result() for f in futures]
    else:
        rows = [run_cell(config, *c, bench=bench) for c in cells]
    agg = aggregate_rows(rows)
    if out_dir is not None:
        write_metrics(rows, agg, out_dir)
    return rows, agg


def _num(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def write_metrics(rows: list[dict], agg: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["method,fraction,seed,f1"] + [
        f"{r['method']},{float(r['fraction'])!r},{r['seed']},{_num(r['f1'])}" for r in rows]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    lines = ["method,fraction,mean_f1,std_f1,n"] + [
        f"{a['method']},{float(a['fraction'])!r},{_num(a['mean_f1'])},{_num(a['std_f1'])},{a['n']}" for a in agg]
    (out / "aggregate.csv").write_text("\n".join(lines) + "\n")
