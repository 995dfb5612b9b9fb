import csv
import json
import math

import numpy as np
import pytest

import mitodml.experiment as exp_mod
from mitodml import io
from mitodml.candidates import detect_candidates
from mitodml.cli import main, mine_bench
from mitodml.experiment import (ExperimentConfig, ExperimentGrid, aggregate_rows, run_experiment, split_fraction,
                                write_metrics)
from mitodml.mining import SQRT2
from mitodml.synth import SynthConfig, synth_dataset, synth_image


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ synthetic data

def test_synth_deterministic_and_in_bounds():
    a = synth_dataset(SynthConfig(seed=9), 3)
    b = synth_dataset(SynthConfig(seed=9), 3)
    for x, y in zip(a, b):
        assert np.array_equal(x.rgb, y.rgb) and x.mitoses == y.mitoses
    for im in a:
        h, w = im.rgb.shape[:2]
        assert len(im.mitoses) == sum(m for _, _, m in im.nuclei)
        assert all(0 <= x < w and 0 <= y < h for x, y in im.mitoses)
    assert not np.array_equal(a[0].rgb, synth_dataset(SynthConfig(seed=10), 1)[0].rgb)


def test_synth_rejects_bad_configs():
    with pytest.raises(ValueError):
        SynthConfig(mitosis_fraction=1.0)
    with pytest.raises(ValueError, match="pack"):
        synth_image(SynthConfig(n_nuclei=(60, 61)), np.random.default_rng(0))


def test_synth_nuclei_respect_separation():
    cfg = SynthConfig(seed=2)
    for im in synth_dataset(cfg, 5):
        pts = np.array([(x, y) for x, y, _ in im.nuclei])
        d = np.hypot(*(pts[:, None] - pts[None]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        # centroids of irregular shapes drift a little from the placement centers
        assert d.min() >= cfg.min_separation - 4


def test_detection_recall_on_synthetic_images():
    hit = total = 0
    for im in synth_dataset(SynthConfig(seed=11), 10):
        cands = np.array([(c.x, c.y) for c in detect_candidates(im.rgb)]).reshape(-1, 2)
        for x, y, _ in im.nuclei:
            total += 1
            hit += len(cands) > 0 and np.min(np.hypot(cands[:, 0] - x, cands[:, 1] - y)) <= 5
    assert hit / total >= 0.95


# ------------------------------------------------------------------ splits & grid

def test_split_fraction():
    data = list(range(25))
    assert split_fraction(data, 1.0, 0) == data
    five = split_fraction(data, 0.2, 0)
    assert len(five) == 5
    assert set(five) <= set(split_fraction(data, 0.4, 0))
    assert len(split_fraction(data, 0.01, 0)) == 1
    with pytest.raises(ValueError):
        split_fraction(data, 0.0, 0)
    with pytest.raises(ValueError):
        split_fraction([], 0.5, 0)


def test_grid_validation():
    with pytest.raises(ValueError):
        ExperimentGrid(fractions=(0, 1))
    with pytest.raises(ValueError):
        ExperimentGrid(seeds=())
    with pytest.raises(ValueError):
        ExperimentGrid(methods=("BCE+Tr-XYZ",))


def test_grid_counts_and_aggregates(monkeypatch, tmp_path):
    def fake_cell(config, method, fraction, seed, bench=None):
        return {"method": method, "fraction": fraction, "seed": seed, "f1": (hash((method, fraction)) % 97) / 97
                + seed * 0.01, "status": "ok"}

    monkeypatch.setattr(exp_mod, "run_cell", fake_cell)
    cfg = ExperimentConfig(grid=ExperimentGrid(fractions=(0.05, 0.1, 0.2, 0.5, 1.0)))
    rows, agg = run_experiment(cfg, tmp_path, bench=object())
    assert len(rows) == 60 and len(agg) == 20
    assert len(read_csv(tmp_path / "metrics.csv")) == 60
    assert len(read_csv(tmp_path / "aggregate.csv")) == 20
    for a in agg:
        f1s = [r["f1"] for r in rows if (r["method"], r["fraction"]) == (a["method"], a["fraction"])]
        assert abs(a["mean_f1"] - np.mean(f1s)) <= 1e-12
        assert a["std_f1"] == pytest.approx(np.std(f1s, ddof=1))


def test_failed_cells_are_marked_and_skipped(tmp_path):
    rows = [{"method": "BCE", "fraction": 1.0, "seed": s, "f1": f} for s, f in enumerate([0.5, float("nan"), 0.7])]
    agg = aggregate_rows(rows)
    assert agg[0]["n"] == 2 and agg[0]["mean_f1"] == pytest.approx(0.6)
    write_metrics(rows, agg, tmp_path)
    assert read_csv(tmp_path / "metrics.csv")[1]["f1"] == "nan"


def test_run_cell_marks_exceptions_failed(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("diverged")

    monkeypatch.setattr(exp_mod, "train", boom)
    cfg = ExperimentConfig(n_images=6, n_test=2, n_val=2)
    bench = exp_mod.build_benchmark(cfg)
    row = exp_mod.run_cell(cfg, "BCE", 1.0, 0, bench)
    assert math.isnan(row["f1"]) and row["status"].startswith("failed")


# ------------------------------------------------------------------ command line

@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d), "--n-images", "6", "--seed", "4"]) == 0
    return d


def test_cli_synth_is_reproducible(cli_dataset, tmp_path):
    main(["synth", "--out", str(tmp_path), "--n-images", "6", "--seed", "4"])
    assert (tmp_path / "annotations.csv").read_bytes() == (cli_dataset / "annotations.csv").read_bytes()
    for p in sorted((cli_dataset / "images").glob("*.png")):
        assert (tmp_path / "images" / p.name).read_bytes() == p.read_bytes()
    assert json.loads((tmp_path / "synth_config.json").read_text())["seed"] == 4
    loaded = io.load_dataset(tmp_path)
    assert len(loaded) == 6 and loaded[0].rgb.dtype == np.uint8


def test_cli_preprocess_train_eval(cli_dataset, tmp_path):
    assert main(["preprocess", "--data", str(cli_dataset)]) == 0
    cands = io.read_candidates(cli_dataset / "candidates.csv")
    assert sum(map(len, cands.values())) > 0
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"method": "BCE+Tr-BHS", "max_epochs": 2, "steps_per_epoch": 1, "batch_size": 8,
                               "initial_nm_ratio": 2.0, "match_radius": 15.0, "patch_offset": 3}))
    out = tmp_path / "run"
    assert main(["train", "--data", str(cli_dataset), "--config", str(cfg), "--out", str(out), "--seed", "1"]) == 0
    for name in ("config.json", "history.csv", "curriculum.csv", "best.json", "best.bin", "detections_val.csv"):
        assert (out / name).exists(), name
    assert len(read_csv(out / "history.csv")) == 2
    assert json.loads((out / "config.json").read_text())["seed"] == 1

    metrics_path, pr_path = tmp_path / "metrics.json", tmp_path / "pr.csv"
    assert main(["eval", "--detections", str(out / "detections_val.csv"), "--annotations",
                 str(cli_dataset / "annotations.csv"), "--out", str(metrics_path), "--radius", "15",
                 "--pr-curve", str(pr_path)]) == 0
    m = json.loads(metrics_path.read_text())
    assert set(m) == {"tp", "fp", "fn", "precision", "recall", "f1"}
    assert len(read_csv(pr_path)) == 21


def test_cli_eval_hand_counts(tmp_path):
    det = tmp_path / "det.csv"
    ann = tmp_path / "ann.csv"
    io.write_points(det, [("a", 10.0, 10.0, 0.9), ("a", 50.0, 50.0, 0.8), ("b", 5.0, 5.0, 0.2)],
                    header=("image_id", "x", "y", "prob"))
    io.write_points(ann, [("a", 12.0, 14.0), ("b", 5.0, 5.0)])
    out = tmp_path / "m.json"
    main(["eval", "--detections", str(det), "--annotations", str(ann), "--out", str(out)])
    m = json.loads(out.read_text())
    assert (m["tp"], m["fp"], m["fn"]) == (1, 1, 1) and m["f1"] == pytest.approx(0.5)


def test_cli_experiment_and_output_root(tmp_path, monkeypatch):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({
        "n_images": 8, "n_test": 2, "n_val": 2,
        "grid": {"methods": ["BCE", "BCE+Tr-RS"], "fractions": [0.5, 1.0], "seeds": [0]},
        "train": {"max_epochs": 1, "steps_per_epoch": 1, "batch_size": 8, "initial_nm_ratio": 2.0,
                  "match_radius": 15.0, "patch_offset": 3}}))
    monkeypatch.setenv(io.OUT_ENV, str(tmp_path / "root"))
    assert main(["experiment", "--config", str(cfg), "--seed", "0"]) == 0
    out = tmp_path / "root" / "experiment"
    rows = read_csv(out / "metrics.csv")
    assert [(r["method"], r["fraction"]) for r in rows] == [("BCE", "0.5"), ("BCE", "1.0"), ("BCE+Tr-RS", "0.5"),
                                                            ("BCE+Tr-RS", "1.0")]
    assert all(0 <= float(r["f1"]) <= 1 for r in rows)
    assert len(read_csv(out / "aggregate.csv")) == 4
    assert (out / "config.json").exists()


def test_mine_bench(tmp_path):
    rows, labels, dm = mine_bench(batch=12, dim=16, draws=300, seed=0)
    bhs_neg = [r for r in rows if r[0] == "BHS" and r[1] == "negative"]
    assert sum(r[6] for r in bhs_neg) == 300 and sum(r[6] > 0 for r in bhs_neg) == 1
    for r in rows:
        if r[0] == "DWS" and r[1] == "negative" and r[4] >= SQRT2:
            assert r[6] == 0 or not any(d < SQRT2 for d in (x[4] for x in rows if x[:2] == r[:2]))
    out = tmp_path / "bench.csv"
    assert main(["mine-bench", "--out", str(out), "--draws", "50", "--batch", "8"]) == 0
    got = read_csv(out)
    assert {r["strategy"] for r in got} == {"RS", "BHS", "DWS"}
