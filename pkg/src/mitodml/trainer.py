"""Joint BCE + triplet training with a hard-negative curriculum.

Schedule: base learning rates 1e-3, 1e-3, 1e-4 from epochs 0, 20, 40 (the
plateau reduction is reset whenever a new base rate takes over), halved after
every 5 epochs without validation-F1 improvement, early stop after 20. Hard
non-mitoses from the unused pool NM' are moved into the active pool NM at the
start of epochs 20 and 40.
"""

from __future__ import annotations

import copy
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, WideResNet, to_input
from .candidates import DetectorConfig, LabeledImage, detect_candidates, extract_patch
from .evaluation import MATCH_RADIUS, PATCH_OFFSET, EvalImage, evaluate
from .losses import bce_logit_grad, bce_loss, triplet_loss_and_grad, weight_penalty, weight_penalty_grads
from .mining import MiningDiagnostics, SamplingConfig, mine
from .tensor_core import OptimizerState, ParameterSet, adam_step, save_checkpoint

log = logging.getLogger(__name__)

METHODS = {"BCE": None, "BCE+Tr-RS": "RS", "BCE+Tr-BHS": "BHS", "BCE+Tr-DWS": "DWS"}


@dataclass
class TrainConfig:
    method: str = "BCE+Tr-DWS"
    batch_size: int = 32
    lr_schedule: tuple = ((0, 1e-3), (20, 1e-3), (40, 1e-4))
    plateau_window: int = 5
    plateau_factor: float = 0.5
    patience: int = 20
    max_epochs: int = 60
    steps_per_epoch: int = 10
    alpha: float = 0.1
    margin: float = 0.5
    beta: float = 0.1
    weight_decay: float = 1e-4
    uniform_positives: bool = False
    normalized_density: bool = True
    dws_fallback: str = "skip"
    hard_negative_epochs: tuple = (20, 40)
    hard_negative_threshold: float = 0.5
    # hard negatives added to NM per hard negative found
    nm_growth_ratio: float = 1.0
    # initial |NM| as a multiple of the mitosis count
    initial_nm_ratio: float = 40.0
    max_translation: int = 5
    decision_threshold: float = 0.5
    match_radius: float = MATCH_RADIUS
    patch_offset: int = PATCH_OFFSET
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.lr_schedule = tuple(tuple(x) for x in self.lr_schedule)
        self.hard_negative_epochs = tuple(self.hard_negative_epochs)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {list(METHODS)}")
        starts = [e for e, _ in self.lr_schedule]
        if starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("lr schedule epochs must start at 0 and strictly increase")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 2")
        if self.alpha < 0 or self.margin <= 0 or self.beta <= 0 or self.weight_decay < 0:
            raise ValueError("alpha, weight_decay must be >= 0; margin, beta must be > 0")

    @property
    def strategy(self) -> str | None:
        return METHODS[self.method]

    def sampling(self) -> SamplingConfig | None:
        if self.strategy is None:
            return None
        return SamplingConfig(self.strategy, self.beta, self.uniform_positives, self.normalized_density,
                              self.dws_fallback)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def rng_streams(seed: int, names=("init", "augment", "mining", "batch", "split")) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one run seed."""
    return {n: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(n.encode()),)))
            for n in names}


# ------------------------------------------------------------------ data


@dataclass
class PatchPool:
    patches: np.ndarray  # (N, S, S, 3) uint8
    refs: list[tuple[str, float, float]]

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class TrainingData:
    mitoses: PatchPool
    non_mitoses: PatchPool
    validation: list[EvalImage]


def eval_images(images: list[LabeledImage], candidates: dict | None = None,
                detector: DetectorConfig | None = None) -> list[EvalImage]:
    out = []
    for im in images:
        cands = candidates[im.image_id] if candidates is not None else detect_candidates(im.rgb, detector)
        out.append(EvalImage(im.image_id, im.rgb, cands, list(im.mitoses)))
    return out


def patch_pools(images: list[LabeledImage], side: int, radius: float, candidates: dict | None = None,
                detector: DetectorConfig | None = None) -> tuple[PatchPool, PatchPool]:
    """Mitotic patches at annotated points; non-mitotic patches at candidates
    farther than ``radius`` from every annotation."""
    mit, mit_refs, non, non_refs = [], [], [], []
    for im in images:
        for x, y in im.mitoses:
            mit.append(extract_patch(im.rgb, (x, y), side))
            mit_refs.append((im.image_id, x, y))
        cands = candidates[im.image_id] if candidates is not None else detect_candidates(im.rgb, detector)
        gt = np.asarray(im.mitoses, float).reshape(-1, 2)
        for c in cands:
            if len(gt) and np.min(np.hypot(gt[:, 0] - c.x, gt[:, 1] - c.y)) <= radius:
                continue
            non.append(extract_patch(im.rgb, (c.x, c.y), side))
            non_refs.append((im.image_id, c.x, c.y))
    empty = np.zeros((0, side, side, 3), np.uint8)
    return (PatchPool(np.stack(mit) if mit else empty, mit_refs),
            PatchPool(np.stack(non) if non else empty, non_refs))


def prepare_training_data(train_images, val_images, config: TrainConfig, candidates: dict | None = None,
                          detector: DetectorConfig | None = None) -> TrainingData:
    mit, non = patch_pools(train_images, config.backbone.patch_side, config.match_radius, candidates, detector)
    return TrainingData(mit, non, eval_images(val_images, candidates, detector))


# ---------------------------------------------------------- augmentation


@dataclass
class AugmentDraw:
    flip_h: bool
    flip_v: bool
    rot90: int
    dx: int
    dy: int


def draw_augmentation(rng: np.random.Generator, max_translation: int = 5) -> AugmentDraw:
    f = rng.integers(0, 2, size=2)
    k = int(rng.integers(0, 4))
    dx, dy = rng.integers(-max_translation, max_translation + 1, size=2)
    return AugmentDraw(bool(f[0]), bool(f[1]), k, int(dx), int(dy))


def apply_augmentation(patch: np.ndarray, d: AugmentDraw) -> np.ndarray:
    """Mirror, rotate by a right angle, then translate (mirror-padded)."""
    out = patch
    if d.flip_h:
        out = out[:, ::-1]
    if d.flip_v:
        out = out[::-1, :]
    out = np.rot90(out, d.rot90, axes=(0, 1))
    if d.dx or d.dy:
        t = max(abs(d.dx), abs(d.dy))
        s = patch.shape[0]
        padded = np.pad(out, ((t, t), (t, t), (0, 0)), mode="reflect")
        # content moves by (+dx, +dy)
        out = padded[t - d.dy:t - d.dy + s, t - d.dx:t - d.dx + s]
    return np.ascontiguousarray(out)


def augment(patch: np.ndarray, rng: np.random.Generator, max_translation: int = 5) -> np.ndarray:
    return apply_augmentation(patch, draw_augmentation(rng, max_translation))


def _pick(n_avail: int, k: int, rng) -> np.ndarray:
    if n_avail >= k:
        return rng.choice(n_avail, size=k, replace=False)
    # every distinct item once, remaining slots drawn with replacement
    return np.concatenate([rng.permutation(n_avail), rng.integers(0, n_avail, size=k - n_avail)])


def build_batch(mitoses: PatchPool, non_mitoses: PatchPool, nm_indices, rng_batch, rng_augment,
                batch_size: int = 32, max_translation: int = 5):
    """Half mitotic, half non-mitotic (from NM), all augmented.

    Returns ``(patches, labels, sources)`` where ``sources`` holds
    ``(label, pool index)`` pairs.
    """
    nm_indices = np.asarray(nm_indices, dtype=np.int64)
    if len(mitoses) == 0:
        raise ValueError("no mitotic patches available")
    if len(nm_indices) == 0:
        raise ValueError("active non-mitosis pool NM is empty")
    half = batch_size // 2
    mi = _pick(len(mitoses), half, rng_batch)
    ni = nm_indices[_pick(len(nm_indices), half, rng_batch)]
    src = [mitoses.patches[i] for i in mi] + [non_mitoses.patches[i] for i in ni]
    patches = np.stack([augment(p, rng_augment, max_translation) for p in src])
    labels = np.array([1] * half + [0] * half, dtype=np.int64)
    sources = [(1, int(i)) for i in mi] + [(0, int(i)) for i in ni]
    return patches, labels, sources


# ------------------------------------------------------------- curriculum


@dataclass
class NegativePool:
    active: list[int]
    complement: list[int]
    log: list[dict] = field(default_factory=list)

    @classmethod
    def initial(cls, n_total: int, n_active: int, rng: np.random.Generator) -> "NegativePool":
        order = rng.permutation(n_total)
        k = min(n_total, max(1, n_active))
        return cls(sorted(order[:k].tolist()), sorted(order[k:].tolist()))

    def extend(self, indices, probs, epoch: int) -> None:
        indices = [int(i) for i in indices]
        moving = set(indices)
        if moving & set(self.active) or not moving <= set(self.complement):
            raise ValueError("hard negatives must come from NM' and be disjoint from NM")
        self.active = sorted(self.active + indices)
        self.complement = [i for i in self.complement if i not in moving]
        self.log.append({"epoch": epoch, "added": indices, "probs": [float(p) for p in probs]})


def mine_hard_negatives(probs, complement, threshold: float = 0.5) -> tuple[list[int], list[float]]:
    """Members of NM' with mitosis probability > threshold, by descending probability
    (ties by pool index)."""
    probs = np.asarray(probs, dtype=np.float64)
    complement = np.asarray(complement, dtype=np.int64)
    if len(complement) == 0:
        return [], []
    keep = probs > threshold
    idx, p = complement[keep], probs[keep]
    order = np.lexsort((idx, -p))
    return idx[order].tolist(), p[order].tolist()


# ------------------------------------------------------------- LR schedule


@dataclass
class PlateauState:
    best: float = -math.inf
    stagnant: int = 0
    reductions: int = 0
    bracket: int = 0


def schedule_bracket(epoch: int, schedule) -> int:
    return max(i for i, (start, _) in enumerate(schedule) if start <= epoch)


def lr_schedule(epoch: int, plateau: PlateauState | None = None, schedule=((0, 1e-3), (20, 1e-3), (40, 1e-4)),
                factor: float = 0.5) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    b = schedule_bracket(epoch, schedule)
    base = schedule[b][1]
    if plateau is None or plateau.bracket != b:
        return base
    return base * factor ** plateau.reductions


def update_plateau(state: PlateauState, val_f1: float, epoch: int, window: int = 5, schedule=None) -> None:
    """Record one epoch's validation F1. Reductions reset when the base rate changes."""
    if val_f1 > state.best:
        state.best = val_f1
        state.stagnant = 0
    else:
        state.stagnant += 1
        if state.stagnant >= window:
            state.reductions += 1
            state.stagnant = 0
    if schedule is not None:
        nxt = schedule_bracket(epoch + 1, schedule)
        if nxt != state.bracket:
            state.bracket = nxt
            state.reductions = 0
            state.stagnant = 0


# ------------------------------------------------------------------ train


HISTORY_FIELDS = ("epoch", "bce", "triplet", "reg", "joint", "lr", "val_f1", "nm_size", "hard_added", "triplets")


@dataclass
class TrainResult:
    params: ParameterSet
    best_epoch: int
    best_val_f1: float
    history: list[dict]
    curriculum: list[dict]
    aborted: bool = False
    diagnostics: dict = field(default_factory=dict)
    # parameters after the last completed epoch
    final_params: ParameterSet | None = None


def train_step(net: WideResNet, params: ParameterSet, opt: OptimizerState, patches, labels, config: TrainConfig,
               lr: float, rng_mining, diagnostics: MiningDiagnostics | None = None) -> dict:
    """One joint-loss Adam step. Returns the loss components."""
    x = to_input(patches, next(iter(params.values.values())).dtype)
    updates: dict = {}
    out, backward = net.forward(params, x, train=True, updates=updates)
    prob = out["prob"]
    bce = bce_loss(prob, labels)
    d_logits = bce_logit_grad(prob, labels)
    sampling = config.sampling()
    triplet, d_emb, n_trip = 0.0, None, 0
    if sampling is not None:
        trips = mine(sampling, labels, out["embedding"], rng_mining, diagnostics)
        n_trip = len(trips)
        triplet, g = triplet_loss_and_grad(out["embedding"], trips, config.margin)
        d_emb = config.alpha * g
    w2 = weight_penalty(params)
    reg = config.weight_decay * w2
    joint = bce + config.alpha * triplet + reg
    if not np.isfinite(joint):
        return {"bce": bce, "triplet": triplet, "reg": reg, "joint": joint, "triplets": n_trip, "finite": False}
    grads = backward(d_emb, d_logits)
    for k, g in weight_penalty_grads(params, config.weight_decay).items():
        grads[k] = grads[k] + g
    adam_step(params, grads, opt, lr)
    params.apply_updates(updates)
    return {"bce": bce, "triplet": triplet, "reg": reg, "joint": joint, "triplets": n_trip, "finite": True}


def train(config: TrainConfig, data: TrainingData, out_dir=None, callback=None) -> TrainResult:
    """Run the curriculum; returns the parameters with the best validation F1."""
    streams = rng_streams(config.seed)
    net = WideResNet(config.backbone)
    params = net.init_params(streams["init"], np.float32)
    opt = OptimizerState.for_params(params)
    n_mit = len(data.mitoses)
    if n_mit == 0:
        raise ValueError("training data holds no mitoses")
    pool = NegativePool.initial(len(data.non_mitoses), int(round(config.initial_nm_ratio * n_mit)), streams["split"])
    plateau = PlateauState()
    diagnostics = MiningDiagnostics()
    history: list[dict] = []
    best = (-math.inf, -1, params.copy())
    since_best = 0
    aborted = False
    out = Path(out_dir) if out_dir is not None else None

    for epoch in range(config.max_epochs):
        added = 0
        if epoch in config.hard_negative_epochs and pool.complement:
            comp = np.asarray(pool.complement)
            probs = net.predict_proba(params, data.non_mitoses.patches[comp])
            idx, p = mine_hard_negatives(probs, comp, config.hard_negative_threshold)
            n_add = int(round(config.nm_growth_ratio * len(idx)))
            if n_add:
                pool.extend(idx[:n_add], p[:n_add], epoch)
                added = n_add
        lr = lr_schedule(epoch, plateau, config.lr_schedule, config.plateau_factor)
        sums = {"bce": 0.0, "triplet": 0.0, "reg": 0.0, "joint": 0.0, "triplets": 0}
        for _ in range(config.steps_per_epoch):
            patches, labels, _ = build_batch(data.mitoses, data.non_mitoses, pool.active, streams["batch"],
                                             streams["augment"], config.batch_size, config.max_translation)
            step = train_step(net, params, opt, patches, labels, config, lr, streams["mining"], diagnostics)
            if not step["finite"]:
                aborted = True
                break
            for k in sums:
                sums[k] += step[k]
        if aborted:
            log.error("non-finite loss at epoch %d; keeping last good checkpoint", epoch)
            break
        metrics, _ = evaluate(net, params, data.validation, config.decision_threshold, config.match_radius,
                              config.patch_offset)
        val_f1 = metrics["f1"]
        n = config.steps_per_epoch
        row = {"epoch": epoch, "bce": sums["bce"] / n, "triplet": sums["triplet"] / n, "reg": sums["reg"] / n,
               "joint": sums["joint"] / n, "lr": lr, "val_f1": val_f1, "nm_size": len(pool.active),
               "hard_added": added, "triplets": sums["triplets"]}
        history.append(row)
        if callback is not None:
            callback(row)
        if val_f1 > best[0]:
            best = (val_f1, epoch, params.copy())
            since_best = 0
            if out is not None:
                save_checkpoint(params, out / "best", step=opt.step, extra={"epoch": epoch, "val_f1": val_f1})
        else:
            since_best += 1
        update_plateau(plateau, val_f1, epoch, config.plateau_window, config.lr_schedule)
        if since_best >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best[1])
            break

    if out is not None:
        write_history(history, out / "history.csv")
        write_curriculum(pool.log, out / "curriculum.csv")
    return TrainResult(best[2], best[1], best[0], history, copy.deepcopy(pool.log), aborted,
                       dict(diagnostics.counts), params)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v)) if isinstance(v, np.integer) else str(v)


def write_history(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(HISTORY_FIELDS)]
    lines += [",".join(_fmt(row[k]) for k in HISTORY_FIELDS) for row in history]
    path.write_text("\n".join(lines) + "\n")


def write_curriculum(entries: list[dict], path) -> None:
    lines = ["epoch,pool_index,prob"]
    for e in entries:
        lines += [f"{e['epoch']},{i},{_fmt(p)}" for i, p in zip(e["added"], e["probs"])]
    Path(path).write_text("\n".join(lines) + "\n")
