"""Training loops, grade prediction and sliding-window segmentation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .errors import DataError, NumericalError
from .metrics import GradePrediction
from .models import GradeNet, ModelGraph, SegNet
from .optim import AdamState, adam_step
from .roi import AugmentParams, augment
from .tensor import Tape, Tensor, backward, no_tape
from .volume import GRADES


@dataclass(frozen=True)
class HyperParams:
    lr: float
    weight_decay: float
    dropout: float
    batch_size: int
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    steps_per_epoch: int | None = None  # segmentation: patches drawn per epoch = steps * batch

    @classmethod
    def grading(cls, **kw) -> HyperParams:
        return cls(**{"lr": 1e-4, "weight_decay": 1e-4, "dropout": 0.4, "batch_size": 8, **kw})

    @classmethod
    def segmentation(cls, **kw) -> HyperParams:
        return cls(**{"lr": 5e-5, "weight_decay": 1e-6, "dropout": 0.05, "batch_size": 4,
                      "steps_per_epoch": 25, **kw})

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError(f"invalid hyperparameters: {self}")


# ----------------------------------------------------------------- datasets

class GradeData(Protocol):
    def __len__(self) -> int: ...
    def load(self, i: int) -> tuple[np.ndarray, np.ndarray | None, int]: ...


@dataclass
class ArrayGradeData:
    """In-memory grading samples: images (4,E,E,E), optional brain masks, labels 0/1."""

    images: list[np.ndarray]
    labels: list[int]
    brains: list[np.ndarray | None] | None = None
    ids: list[str] | None = None

    def __len__(self) -> int:
        return len(self.images)

    def load(self, i: int):
        return self.images[i], None if self.brains is None else self.brains[i], int(self.labels[i])


@dataclass
class SegSample:
    channels: np.ndarray  # (4, D, H, W), standardised
    tumor: np.ndarray
    brain: np.ndarray
    subject_id: str = ""


# ----------------------------------------------------------------- logging

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    best: bool
    steps: int

    def to_json(self, elapsed: float) -> str:
        row = asdict(self)
        # wall-clock values live only under "time" so the rest is reproducible
        row["time"] = {"utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                       "elapsed_s": round(elapsed, 3)}
        return json.dumps(row, sort_keys=True)


@dataclass
class TrainResult:
    model: ModelGraph
    best_epoch: int
    best_metric: float
    history: list[EpochRecord] = field(default_factory=list)
    stopped: str = "max_epochs"
    elapsed_s: float = 0.0


def _finite_or_raise(loss: float, epoch: int, batch: int) -> None:
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


def _sgd_step(model: ModelGraph, x: np.ndarray, y: np.ndarray, hyper: HyperParams, state: AdamState,
              rng: np.random.Generator, epoch: int, batch: int) -> tuple[float, AdamState]:
    params = model.param_tensors(requires_grad=True)
    with Tape() as tape:
        res = model.forward(Tensor(x), train=True, rng=rng, params=params, dropout=hyper.dropout)
        _, loss = ops.softmax_crossentropy(res.logits, y)
    value = float(loss.item())
    _finite_or_raise(value, epoch, batch)
    g = backward(loss, tape)
    grads = {k: g[t] for k, t in params.items() if t in g}
    model.params, state = adam_step(model.params, grads, state, hyper.lr, weight_decay=hyper.weight_decay)
    return value, state


class _Loop:
    """Shared epoch / early-stopping / checkpoint machinery."""

    def __init__(self, model, hyper, log_path, checkpoint_path, time_budget_s, progress):
        self.model = model
        self.hyper = hyper
        self.log = Path(log_path) if log_path else None
        self.ckpt = Path(checkpoint_path) if checkpoint_path else None
        self.budget = time_budget_s
        self.progress = progress
        if self.log:
            self.log.parent.mkdir(parents=True, exist_ok=True)
            self.log.write_text("")

    def run(self, train_epoch, validate, better) -> TrainResult:
        t0 = time.perf_counter()
        best_key, best_model, best_epoch, best_metric = None, None, 0, float("nan")
        history, stale, stopped = [], 0, "max_epochs"
        last_epoch_s = 0.0
        for epoch in range(1, self.hyper.max_epochs + 1):
            te = time.perf_counter()
            train_loss, steps = train_epoch(epoch)
            val_loss, metric = validate()
            key = better(metric, val_loss)
            improved = best_key is None or key > best_key
            if improved:
                best_key, best_epoch, best_metric = key, epoch, metric
                best_model = self.model.copy()
                stale = 0
                if self.ckpt:
                    save_checkpoint(best_model, self.ckpt, seed=self.hyper.seed, epoch=epoch, metric=metric)
            else:
                stale += 1
            rec = EpochRecord(epoch, train_loss, val_loss, metric, improved, steps)
            history.append(rec)
            elapsed = time.perf_counter() - t0
            if self.log:
                with open(self.log, "a") as f:
                    f.write(rec.to_json(elapsed) + "\n")
            if self.progress:
                self.progress(rec)
            last_epoch_s = time.perf_counter() - te
            if stale >= self.hyper.patience:
                stopped = "early_stopping"
                break
            if self.budget is not None and elapsed + last_epoch_s > self.budget:
                stopped = "time_budget"
                break
        return TrainResult(best_model, best_epoch, best_metric, history, stopped, time.perf_counter() - t0)


# ----------------------------------------------------------------- grading

def _eval_logits(model: ModelGraph, images: list[np.ndarray]) -> np.ndarray:
    """Eval-mode logits, one subject per forward pass (batch-size independent)."""
    with no_tape():
        return np.concatenate([model.forward(img, train=False).logits.data for img in images])


def evaluate_grading(model: GradeNet, data: GradeData) -> tuple[float, float, np.ndarray]:
    """(accuracy, mean cross-entropy, P(HGG) per sample)."""
    logits, labels = [], []
    for i in range(len(data)):
        img, _, y = data.load(i)
        logits.append(_eval_logits(model, [img])[0])
        labels.append(y)
    logits = np.stack(logits).astype(np.float64)
    labels = np.asarray(labels)
    p = ops.softmax(logits, axis=1)
    loss = float(-np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300)).mean())
    acc = float(np.mean((p[:, 1] >= p[:, 0]).astype(int) == labels))
    return acc, loss, p[:, 1]


def train_grading(model: GradeNet, train_data: GradeData, val_data: GradeData, hyper: HyperParams,
                  augment_params: AugmentParams | None = None, log_path=None, checkpoint_path=None,
                  time_budget_s: float | None = None, progress=None) -> TrainResult:
    """Mini-batch Adam on cross-entropy; keeps the best (accuracy, -val loss) epoch."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise DataError("training and validation sets must be non-empty")
    rng = np.random.default_rng(hyper.seed)
    state = AdamState()

    def train_epoch(epoch):
        nonlocal state
        order = rng.permutation(len(train_data))
        losses = []
        for b, start in enumerate(range(0, len(order), hyper.batch_size)):
            xs, ys = [], []
            for i in order[start : start + hyper.batch_size]:
                img, brain, y = train_data.load(int(i))
                if augment_params is not None:
                    img = augment(img, augment_params, rng, brain=brain).image
                xs.append(img)
                ys.append(y)
            if len(xs) < 2 and len(order) > 1:
                continue  # batch-norm needs more than one sample
            loss, state = _sgd_step(model, np.stack(xs), np.asarray(ys), hyper, state, rng, epoch, b)
            losses.append(loss)
        return float(np.mean(losses)), len(losses)

    def validate():
        acc, loss, _ = evaluate_grading(model, val_data)
        return loss, acc

    loop = _Loop(model, hyper, log_path, checkpoint_path, time_budget_s, progress)
    return loop.run(train_epoch, validate, lambda metric, loss: (metric, -loss))


@dataclass(frozen=True)
class GradeOutput:
    probabilities: tuple[float, float]
    grade: str
    tie: bool

    def as_prediction(self, subject_id: str, truth: str | None = None) -> GradePrediction:
        return GradePrediction(subject_id, float(self.probabilities[1]), self.grade, truth, self.tie)


def predict_grade(model: GradeNet, roi: np.ndarray) -> GradeOutput:
    roi = np.asarray(roi)
    e = model.config.input_extent
    want = (model.config.in_channels, e, e, e)
    if roi.shape != want:
        raise ValueError(f"predict_grade expects an ROI of shape {want}, got {roi.shape}")
    logits = _eval_logits(model, [roi.astype(np.float32)])[0].astype(np.float64)
    p = ops.softmax(logits, axis=0)
    tie = bool(p[0] == p[1])
    grade = GRADES[1] if p[1] >= p[0] else GRADES[0]
    return GradeOutput((float(p[0]), float(p[1])), grade, tie)


# ----------------------------------------------------------------- segmentation

def _pad_volume(a: np.ndarray, pad: int) -> np.ndarray:
    width = [(0, 0)] * (a.ndim - 3) + [(pad, pad)] * 3
    return np.pad(a, width)


def sample_patch(sample: SegSample, patch: int, out_extent: int, rng: np.random.Generator,
                 tumor_prob: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Input patch (4,P,P,P) and label (O,O,O) centred on a tumour voxel with
    probability ``tumor_prob``, otherwise on a random brain voxel."""
    use_tumor = sample.tumor.any() and rng.random() < tumor_prob
    pool = np.flatnonzero(sample.tumor if use_tumor else sample.brain)
    center = np.array(np.unravel_index(int(pool[rng.integers(len(pool))]), sample.brain.shape))
    lo = center - patch // 2 + patch  # in padded coordinates
    chans = _pad_volume(sample.channels, patch)
    tum = _pad_volume(sample.tumor.astype(np.uint8), patch)
    sl = tuple(slice(int(l), int(l) + patch) for l in lo)
    off = (patch - out_extent) // 2
    osl = tuple(slice(int(l) + off, int(l) + off + out_extent) for l in lo)
    return chans[(slice(None),) + sl].copy(), tum[osl].astype(np.int64)


def _flip_pair(x, y, rng):
    if rng.random() < 0.5:
        x, y = x[..., ::-1], y[..., ::-1]
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def soft_dice(prob: np.ndarray, truth: np.ndarray, eps: float = 1e-6) -> float:
    t = truth.astype(np.float64)
    return float((2 * np.sum(prob * t) + eps) / (np.sum(prob) + np.sum(t) + eps))


def train_segmentation(model: SegNet, train_data: list[SegSample], val_data: list[SegSample],
                       hyper: HyperParams, flip: bool = True, val_patches: int = 2, log_path=None,
                       checkpoint_path=None, time_budget_s: float | None = None, progress=None) -> TrainResult:
    """Patch-based training; model selection on mean soft Dice of fixed validation patches."""
    if not train_data or not val_data:
        raise DataError("training and validation sets must be non-empty")
    rng = np.random.default_rng(hyper.seed)
    patch = model.config.patch
    out_e = model.output_extent()
    state = AdamState()
    steps = hyper.steps_per_epoch or max(1, len(train_data) // hyper.batch_size)

    vrng = np.random.default_rng([hyper.seed, 1])
    fixed = [sample_patch(s, patch, out_e, vrng, tumor_prob=1.0 if k % 2 == 0 else 0.0)
             for s in val_data for k in range(val_patches)]

    def train_epoch(epoch):
        nonlocal state
        losses = []
        for b in range(steps):
            xs, ys = [], []
            for _ in range(hyper.batch_size):
                s = train_data[int(rng.integers(len(train_data)))]
                x, y = sample_patch(s, patch, out_e, rng)
                if flip:
                    x, y = _flip_pair(x, y, rng)
                xs.append(x)
                ys.append(y)
            loss, state = _sgd_step(model, np.stack(xs), np.stack(ys), hyper, state, rng, epoch, b)
            losses.append(loss)
        return float(np.mean(losses)), steps

    def validate():
        losses, dices = [], []
        with no_tape():
            for x, y in fixed:
                logits = model.forward(x, train=False).logits.data[0].astype(np.float64)
                p = ops.softmax(logits, axis=0)
                losses.append(float(-np.log(np.maximum(np.take_along_axis(p, y[None], 0), 1e-300)).mean()))
                if y.any():
                    dices.append(soft_dice(p[1], y))
        return float(np.mean(losses)), float(np.mean(dices)) if dices else 0.0

    loop = _Loop(model, hyper, log_path, checkpoint_path, time_budget_s, progress)
    return loop.run(train_epoch, validate, lambda metric, loss: (metric, -loss))


def valid_tile(model: SegNet, at_least: int) -> int:
    """Smallest input tile >= ``at_least`` whose shrinkage equals the training patch's."""
    t = max(int(at_least), model.config.patch)
    for cand in range(t, t + 4 * 2 ** model.config.levels + 1):
        try:
            if cand - model.output_extent(cand) == model.shrinkage:
                return cand
        except ValueError:
            continue
    raise ValueError(f"no valid tile size near {at_least}")


def segment_whole_tumor(model: SegNet, channels: np.ndarray, tile: int | None = None,
                        brain: np.ndarray | None = None, probabilities: bool = False) -> np.ndarray:
    """Tile the volume so every voxel is predicted exactly once by an output block.

    Input tiles overlap by the network's shrinkage; the volume is zero-padded
    by half the shrinkage on each side (plus whatever the last tile needs).
    """
    channels = np.asarray(channels, dtype=np.float32)
    if channels.ndim != 4:
        raise DataError(f"expected (C, D, H, W) volume, got shape {channels.shape}")
    patch = model.config.patch
    spatial = channels.shape[1:]
    if min(spatial) < patch:
        raise DataError(f"volume {spatial} is smaller than the {patch}^3 patch; zero-pad it to at least {patch}")
    tile = patch if tile is None else int(tile)
    s = model.shrinkage
    out_e = model.output_extent(tile)
    if tile - out_e != s:
        raise ValueError(f"tile {tile} changes the network's shrinkage; try {valid_tile(model, tile)}")
    half = s // 2
    n = [int(np.ceil(d / out_e)) for d in spatial]
    padded = np.zeros((channels.shape[0],) + tuple(k * out_e + s for k in n), dtype=np.float32)
    padded[:, half : half + spatial[0], half : half + spatial[1], half : half + spatial[2]] = channels
    prob = np.zeros(tuple(k * out_e for k in n), dtype=np.float64)
    with no_tape():
        for i in range(n[0]):
            for j in range(n[1]):
                for k in range(n[2]):
                    lo = (i * out_e, j * out_e, k * out_e)
                    x = padded[:, lo[0] : lo[0] + tile, lo[1] : lo[1] + tile, lo[2] : lo[2] + tile]
                    logits = model.forward(x, train=False).logits.data[0].astype(np.float64)
                    if not np.all(np.isfinite(logits)):
                        raise NumericalError(f"non-finite logits in tile at {lo}")
                    prob[lo[0] : lo[0] + out_e, lo[1] : lo[1] + out_e, lo[2] : lo[2] + out_e] = \
                        ops.softmax(logits, axis=0)[1]
    prob = prob[: spatial[0], : spatial[1], : spatial[2]]
    if brain is not None:
        prob = prob * np.asarray(brain).astype(bool)
    if probabilities:
        return prob
    return (prob > 0.5).astype(np.uint8)


def with_epochs(hyper: HyperParams, epochs: int) -> HyperParams:
    return replace(hyper, max_epochs=epochs)
