"""Two-agent cooperative training over a shared encoder.

The classifier agent updates ``theta1 ∪ theta2`` and the segmentation agent
updates ``theta1 ∪ theta3``. Each agent owns its own Nesterov momentum buffers
(including separate buffers for the shared encoder) and a polynomially decaying
learning rate.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .architecture import ModelParams, build_model, classify, decode, encode
from .config import ArchConfig, TrainConfig
from .core import Tensor, backward, get_default_dtype, no_grad, softmax_cross_entropy
from .data import MARGIN, NUM_GRADES, Dataset, Sample, write_pgm8
from .metrics import ConfusionMatrix, binary_accuracy, topk_accuracy

logger = logging.getLogger(__name__)

REPORT_FIELDS = ("round", "clf_loss", "seg_loss", "clf_lr", "seg_lr", "miou", "top1", "top2", "binacc")


class ConsistencyError(RuntimeError):
    """Optimizer asked to step a parameter that has no gradient."""


# ---------------------------------------------------------------- optimization


def poly_lr(step: int, total: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - step/total) ** power."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 - step / total) ** power


@dataclass
class OptimizerState:
    """Nesterov momentum buffers for one agent's parameter partition."""

    name: str
    params: dict[str, Tensor]
    base_lr: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for key, p in self.params.items():
            self.velocity.setdefault(key, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def nesterov_step(state: OptimizerState, lr: float, grads: dict[str, np.ndarray] | None = None) -> None:
    """v <- mu v - lr g;  theta <- theta + mu v - lr g."""
    mu = state.momentum
    for key, p in state.params.items():
        g = p.grad if grads is None else grads.get(key)
        if g is None:
            raise ConsistencyError(f"{state.name}: no gradient for {key}")
        v = state.velocity[key]
        v *= mu
        v -= lr * g
        p.data += mu * v - lr * g
    state.step += 1


def partition_params(model: ModelParams, *names: str) -> dict[str, Tensor]:
    parts = model.partitions()
    return {f"{n}/{k}": t for n in names for k, t in parts[n]}


def make_agents(model: ModelParams, cfg: TrainConfig) -> dict[str, OptimizerState]:
    return {
        "clf": OptimizerState("clf", partition_params(model, "theta1", "theta2"), cfg.clf_lr, cfg.momentum),
        "seg": OptimizerState("seg", partition_params(model, "theta1", "theta3"), cfg.seg_lr, cfg.momentum),
    }


# ---------------------------------------------------------------- labels


def randomize_labels(dataset: Dataset, p: float, seed: int, num_grades: int = NUM_GRADES) -> Dataset:
    """Replace the grades of a fixed random subset of round(p * n) samples with uniform draws."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    out = dataset.subset(np.arange(len(dataset)))
    n = len(out)
    k = int(math.floor(p * n + 0.5))
    if k == 0:
        return out
    rng = np.random.default_rng([seed, 0x1ABE1])
    rows = np.sort(rng.choice(n, size=k, replace=False))
    out.grades[rows] = rng.integers(0, num_grades, size=k)
    out.corrupted[rows] = True
    return out


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    offset: tuple[int, int]
    flip_h: bool = False
    flip_v: bool = False
    shift: tuple[int, int] = (0, 0)
    hue: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0

    @classmethod
    def identity(cls, margin: int = MARGIN) -> "AugmentParams":
        return cls(offset=(margin // 2, margin // 2))


def draw_augment(rng: np.random.Generator, task: str, margin: int = MARGIN, max_shift: int = 4) -> AugmentParams:
    if task not in ("clf", "seg"):
        raise ValueError(f"task must be 'clf' or 'seg', got {task!r}")
    oy, ox = (int(v) for v in rng.integers(0, margin + 1, size=2))
    flip_h, flip_v = (bool(v) for v in rng.random(2) < 0.5)
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    params = AugmentParams((oy, ox), flip_h, flip_v, (dy, dx))
    if task == "clf":
        hue = float(rng.uniform(-0.1, 0.1))
        contrast, saturation = (float(np.exp(v)) for v in rng.uniform(np.log(0.8), np.log(1.25), size=2))
        params = replace(params, hue=hue, contrast=contrast, saturation=saturation)
    return params


def _shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(arr)
    h, w = arr.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = arr[..., ys, xs]
    return out


def apply_geometric(arr: np.ndarray, params: AugmentParams, size: int) -> np.ndarray:
    """Crop, flip, then zero-fill shift; works on (H, W) masks and (C, H, W) images."""
    oy, ox = params.offset
    if oy < 0 or ox < 0 or oy + size > arr.shape[-2] or ox + size > arr.shape[-1]:
        raise ValueError(f"crop {size} at {params.offset} exceeds image {arr.shape[-2:]}")
    out = arr[..., oy:oy + size, ox:ox + size]
    if params.flip_h:
        out = out[..., :, ::-1]
    if params.flip_v:
        out = out[..., ::-1, :]
    if params.shift != (0, 0):
        return _shift(out, *params.shift)
    return np.ascontiguousarray(out)


_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def photometric(image: np.ndarray, hue: float, contrast: float, saturation: float) -> np.ndarray:
    """Hue rotation (in turns), saturation and contrast scaling of a (3, H, W) image."""
    t = 2 * np.pi * hue
    rot = np.array([[1, 0, 0], [0, np.cos(t), -np.sin(t)], [0, np.sin(t), np.cos(t)]])
    mix = np.diag([1.0, saturation, saturation])
    m = _YIQ2RGB @ mix @ rot @ _RGB2YIQ
    out = np.tensordot(m, image, axes=(1, 0))
    mean = out.mean()
    out = mean + contrast * (out - mean)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment(sample: Sample, rng: np.random.Generator, task: str, size: int | None = None,
            params: AugmentParams | None = None) -> Sample:
    """Same geometric transform for image and mask; colour jitter for the classifier only."""
    size = sample.image.shape[-1] - MARGIN if size is None else size
    if size > sample.image.shape[-1] or size > sample.image.shape[-2]:
        raise ValueError(f"crop {size} larger than image {sample.image.shape[-2:]}")
    if params is None:
        params = draw_augment(rng, task, margin=sample.image.shape[-1] - size)
    image = apply_geometric(sample.image, params, size)
    mask = apply_geometric(sample.mask, params, size)
    if task == "clf" and (params.hue, params.contrast, params.saturation) != (0.0, 1.0, 1.0):
        image = photometric(image, params.hue, params.contrast, params.saturation)
    return Sample(image, mask, sample.grade, sample.corrupted, sample.counts)


def standardize(image: np.ndarray) -> np.ndarray:
    """Per-image zero mean, unit standard deviation over all channels and pixels."""
    mean = image.mean(dtype=np.float64)
    std = image.std(dtype=np.float64)
    return ((image - mean) / max(std, 1e-6)).astype(image.dtype)


def make_batch(dataset: Dataset, rows, rng: np.random.Generator, task: str, size: int):
    images, masks = [], []
    for r in rows:
        s = augment(dataset[int(r)], rng, task, size)
        images.append(standardize(s.image))
        masks.append(s.mask)
    x = Tensor(np.stack(images))
    if task == "clf":
        return x, dataset.grades[np.asarray(rows)].astype(np.int64)
    return x, np.stack(masks).astype(np.int64)


def center_batch(dataset: Dataset, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic center crops, standardized, for evaluation."""
    off = (dataset.images.shape[-1] - size) // 2
    images = dataset.images[:, :, off:off + size, off:off + size]
    masks = dataset.masks[:, off:off + size, off:off + size]
    x = np.stack([standardize(im) for im in images]).astype(get_default_dtype())
    return x, masks.astype(np.int64)


# ---------------------------------------------------------------- cooperative round


def cooperative_round(model: ModelParams, clf_batch, seg_batch, agents: dict[str, OptimizerState],
                      lrs: tuple[float, float], mode: str = "joint") -> tuple[float | None, float | None]:
    """One classifier step then one segmentation step; returns the two losses."""
    clf_loss = seg_loss = None
    if mode in ("joint", "clf_only"):
        model.zero_grad()
        x, grades = clf_batch
        loss = softmax_cross_entropy(classify(model, encode(model, x, "train"), "train"), grades,
                                     "per_sample_mean")
        backward(loss)
        nesterov_step(agents["clf"], lrs[0])
        clf_loss = float(loss.data)
    if mode in ("joint", "seg_only"):
        model.zero_grad()
        x, masks = seg_batch
        loss = softmax_cross_entropy(decode(model, encode(model, x, "train"), "train"), masks,
                                     "per_pixel_mean")
        backward(loss)
        nesterov_step(agents["seg"], lrs[1])
        seg_loss = float(loss.data)
    model.zero_grad()
    return clf_loss, seg_loss


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    top1: float
    top2: float
    binacc: float
    miou: float
    grade_logits: np.ndarray
    pred_masks: np.ndarray

    def row(self) -> dict[str, float]:
        return {"miou": self.miou, "top1": self.top1, "top2": self.top2, "binacc": self.binacc}


def predict(model: ModelParams, x: np.ndarray, batch_size: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Grade logits (N, K) and seg logits (N, C, H, W) with batch norm in eval mode."""
    grades, segs = [], []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            enc = encode(model, Tensor(x[lo:lo + batch_size]), "eval")
            grades.append(classify(model, enc, "eval").data.reshape(-1, model.cfg.num_grades))
            segs.append(decode(model, enc, "eval").data)
    return np.concatenate(grades), np.concatenate(segs)


def evaluate(model: ModelParams, dataset: Dataset, batch_size: int = 50, exclude_background: bool = False,
             prepared: tuple[np.ndarray, np.ndarray] | None = None) -> EvalResult:
    x, masks = prepared if prepared is not None else center_batch(dataset, model.cfg.input_hw)
    grade_logits, seg_logits = predict(model, x, batch_size)
    pred_masks = seg_logits.argmax(axis=1)
    cm = ConfusionMatrix(model.cfg.num_seg_classes).update(masks, pred_masks)
    grades = dataset.grades
    return EvalResult(
        confusion=cm,
        top1=topk_accuracy(grade_logits, grades, 1),
        top2=topk_accuracy(grade_logits, grades, 2),
        binacc=binary_accuracy(grade_logits.argmax(axis=1), grades),
        miou=cm.miou(exclude_background),
        grade_logits=grade_logits,
        pred_masks=pred_masks.astype(np.uint8),
    )


# ---------------------------------------------------------------- report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentReport:
    seed: int
    mode: str
    rows: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    per_class_iou: list[float] = field(default_factory=list)

    def evaluations(self) -> list[dict]:
        return [r for r in self.rows if r.get("miou") is not None]

    @property
    def final(self) -> dict:
        return self.evaluations()[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for row in self.rows:
            writer.writerow([_fmt(row.get(k)) for k in REPORT_FIELDS])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @staticmethod
    def read_rows(path) -> list[dict]:
        rows = []
        with open(path, newline="") as fh:
            for raw in csv.DictReader(fh):
                row = {}
                for k in REPORT_FIELDS:
                    v = raw.get(k, "")
                    row[k] = None if v == "" else (int(v) if k == "round" else float(v))
                rows.append(row)
        return rows


# ---------------------------------------------------------------- training loop


def train(cfg: TrainConfig, train_set: Dataset, val_set: Dataset | None, arch: ArchConfig,
          out_dir: str | Path | None = None, model: ModelParams | None = None,
          on_eval: Callable[[int, ModelParams, EvalResult], None] | None = None,
          dump_masks: int = 8) -> tuple[ModelParams, ExperimentReport]:
    """Run ``cfg.rounds`` cooperative rounds; deterministic given ``cfg.seed``.

    Validation metrics are recorded at round 0, every ``cfg.eval_interval``
    rounds and after the last round, unless ``val_set`` is None.
    """
    from .checkpoint import save_checkpoint

    cfg.validate()
    arch.validate()
    start = time.perf_counter()
    if model is None:
        model = build_model(arch, np.random.default_rng(cfg.seed))
    agents = make_agents(model, cfg)
    clf_set = randomize_labels(train_set, cfg.random_label_fraction, cfg.seed) if cfg.random_label_fraction else train_set
    prepared = center_batch(val_set, arch.input_hw) if val_set is not None else None
    report = ExperimentReport(cfg.seed, cfg.mode)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def run_eval(r: int, row: dict) -> None:
        if val_set is None:
            return
        res = evaluate(model, val_set, prepared=prepared)
        row.update(res.row())
        report.per_class_iou = [float(v) for v in res.confusion.iou_per_class()]
        logger.info("round %d: miou=%.4f top1=%.4f top2=%.4f binacc=%.4f",
                    r, res.miou, res.top1, res.top2, res.binacc)
        if out is not None and dump_masks:
            mdir = out / "masks" / f"round_{r:06d}"
            mdir.mkdir(parents=True, exist_ok=True)
            for i in range(min(dump_masks, len(val_set))):
                write_pgm8(mdir / f"{int(val_set.indices[i]):06d}.pgm", res.pred_masks[i])
        if on_eval is not None:
            on_eval(r, model, res)

    row0 = {"round": 0}
    run_eval(0, row0)
    report.rows.append(row0)

    n = len(train_set)
    for r in range(1, cfg.rounds + 1):
        # separate streams keep seg batches identical across modes
        clf_rng = np.random.default_rng([cfg.seed, r, 0])
        seg_rng = np.random.default_rng([cfg.seed, r, 1])
        lrs = (poly_lr(r - 1, cfg.rounds, cfg.clf_lr, cfg.poly_power),
               poly_lr(r - 1, cfg.rounds, cfg.seg_lr, cfg.poly_power))
        clf_batch = seg_batch = None
        if cfg.mode != "seg_only":
            rows = clf_rng.choice(n, size=min(cfg.clf_batch, n), replace=False)
            clf_batch = make_batch(clf_set, rows, clf_rng, "clf", arch.input_hw)
        if cfg.mode != "clf_only":
            rows = seg_rng.choice(n, size=min(cfg.seg_batch, n), replace=False)
            seg_batch = make_batch(train_set, rows, seg_rng, "seg", arch.input_hw)
        clf_loss, seg_loss = cooperative_round(model, clf_batch, seg_batch, agents, lrs, cfg.mode)
        row = {"round": r, "clf_loss": clf_loss, "seg_loss": seg_loss,
               "clf_lr": lrs[0] if cfg.mode != "seg_only" else None,
               "seg_lr": lrs[1] if cfg.mode != "clf_only" else None}
        if r % cfg.eval_interval == 0 or r == cfg.rounds:
            run_eval(r, row)
        report.rows.append(row)
        if out is not None and cfg.checkpoint_interval and r % cfg.checkpoint_interval == 0 and r != cfg.rounds:
            save_checkpoint(out / f"checkpoint_{r:06d}.cseg", model, agents, r)
        if r % 100 == 0:
            logger.info("round %d clf_loss=%s seg_loss=%s (%.0fs)", r, clf_loss, seg_loss,
                        time.perf_counter() - start)

    report.wall_clock = time.perf_counter() - start
    if out is not None:
        report.save(out / "report.csv")
        save_checkpoint(out / "checkpoint.cseg", model, agents, cfg.rounds)
    return model, report
