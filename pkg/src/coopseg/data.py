"""Synthetic fundus-like images with lesion masks and severity grades, plus disk I/O.

Each image shows an orange-brown disc on a dark background with up to five
kinds of lesion drawn on it. The mask stores a class id per pixel
(0 = background) and the grade is a deterministic function of lesion counts.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig

NUM_SEG_CLASSES = 6
NUM_GRADES = 5
MARGIN = 8

CLASS_NAMES = ("background", "hard_exudate", "hemorrhage", "microaneurysm", "soft_exudate", "artifact")
_COLORS = {
    1: (0.97, 0.88, 0.30),
    2: (0.30, 0.04, 0.03),
    3: (0.52, 0.03, 0.05),
    4: (0.93, 0.88, 0.74),
    5: (1.00, 1.00, 0.96),
}


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message carries the path and byte offset."""

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = Path(path)
        self.offset = offset


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    grade: int
    corrupted: bool = False
    counts: tuple[int, ...] | None = None


@dataclass
class Dataset:
    """Column-stacked samples; ``indices`` are the generator indices."""

    images: np.ndarray
    masks: np.ndarray
    grades: np.ndarray
    corrupted: np.ndarray
    indices: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.grades)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i], int(self.grades[i]), bool(self.corrupted[i]))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.images[rows], self.masks[rows], self.grades[rows].copy(),
                       self.corrupted[rows].copy(), self.indices[rows].copy(), dict(self.meta))

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        """Rows with generator index < n_train, then the rest."""
        train = np.flatnonzero(self.indices < n_train)
        val = np.flatnonzero(self.indices >= n_train)
        return self.subset(train), self.subset(val)

    @classmethod
    def from_samples(cls, samples: list[Sample], indices, meta=None) -> "Dataset":
        return cls(
            images=np.stack([s.image for s in samples]).astype(np.float32),
            masks=np.stack([s.mask for s in samples]).astype(np.uint8),
            grades=np.array([s.grade for s in samples], dtype=np.int64),
            corrupted=np.array([s.corrupted for s in samples], dtype=bool),
            indices=np.asarray(indices, dtype=np.int64),
            meta=dict(meta or {}),
        )


def grade_from_lesions(counts) -> int:
    """Severity grade 0..4 from per-class lesion counts (classes 1..5, artifacts ignored)."""
    c = [int(v) for v in counts] + [0] * (5 - len(counts))
    if any(v < 0 for v in c):
        raise ValueError("lesion counts must be non-negative")
    score = c[2] + 2 * c[0] + 3 * c[1] + 3 * c[3]
    if score == 0:
        return 0
    if score <= 2:
        return 1
    if score <= 5:
        return 2
    if score <= 9:
        return 3
    return 4


# ---------------------------------------------------------------- rendering


@dataclass
class Lesion:
    cls: int
    footprint: np.ndarray
    alpha: np.ndarray


def _disc(rng, total: int):
    cy = total / 2 - 0.5 + rng.uniform(-2, 2)
    cx = total / 2 - 0.5 + rng.uniform(-2, 2)
    radius = total * rng.uniform(0.40, 0.45)
    return cy, cx, radius


def _point_in_disc(rng, cy, cx, radius, margin):
    r = (radius - margin) * np.sqrt(rng.uniform())
    t = rng.uniform(0, 2 * np.pi)
    return cy + r * np.sin(t), cx + r * np.cos(t)


def _lesion(cls: int, rng, yy, xx, disc, cy, cx, radius) -> Lesion:
    if cls == 1:
        y, x = _point_in_disc(rng, cy, cx, radius, 3)
        r = rng.uniform(1.0, 2.0)
        fp = (yy - y) ** 2 + (xx - x) ** 2 <= r * r
        alpha = fp * 0.95
    elif cls == 2:
        y, x = _point_in_disc(rng, cy, cx, radius, 6)
        fp = np.zeros_like(disc)
        for _ in range(rng.integers(2, 4)):
            oy, ox = rng.uniform(-2, 2, size=2)
            r = rng.uniform(2.0, 4.0)
            fp |= (yy - y - oy) ** 2 + (xx - x - ox) ** 2 <= r * r
        alpha = fp * 0.9
    elif cls == 3:
        y, x = _point_in_disc(rng, cy, cx, radius, 3)
        side = int(rng.integers(1, 3))
        y0, x0 = int(round(y)), int(round(x))
        fp = (yy >= y0) & (yy < y0 + side) & (xx >= x0) & (xx < x0 + side)
        alpha = fp * 0.9
    elif cls == 4:
        y, x = _point_in_disc(rng, cy, cx, radius, 6)
        half = rng.uniform(5.0, 9.0) / 2
        d2 = ((yy - y) ** 2 + (xx - x) ** 2) / (half * half)
        fp = d2 <= 1.0
        alpha = 0.85 * np.exp(-1.2 * d2)
    elif cls == 5:
        y, x = _point_in_disc(rng, cy, cx, radius, 4)
        arc_r = rng.uniform(6.0, 14.0)
        t0 = rng.uniform(0, 2 * np.pi)
        span = rng.uniform(0.6, 1.4)
        ay, ax = y - arc_r * np.sin(t0), x - arc_r * np.cos(t0)
        dist = np.abs(np.hypot(yy - ay, xx - ax) - arc_r)
        ang = np.mod(np.arctan2(yy - ay, xx - ax) - t0 + np.pi, 2 * np.pi) - np.pi
        fp = (dist <= 0.9) & (np.abs(ang) <= span / 2)
        alpha = fp * 0.85
    else:
        raise ValueError(f"no lesion class {cls}")
    fp = fp & disc
    return Lesion(cls, fp, np.where(fp | (cls == 4), alpha, 0.0) * disc)


def lesion_counts(cfg: DataConfig, rng) -> np.ndarray:
    severity = 0.0 if rng.uniform() < cfg.healthy_fraction else rng.uniform()
    rates = np.array(cfg.max_counts[:4]) * severity
    return np.concatenate([rng.poisson(rates), rng.poisson(cfg.max_counts[4:5])])


def render_sample(cfg: DataConfig, seed: int, index: int, counts=None) -> tuple[Sample, list[Lesion], np.ndarray]:
    """Render one sample; also return its lesions in draw order and the disc mask."""
    rng = np.random.default_rng([seed, index])
    total = cfg.size + MARGIN
    yy, xx = np.mgrid[0:total, 0:total].astype(np.float64)
    cy, cx, radius = _disc(rng, total)
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius ** 2
    disc = r2 <= 1.0

    base = np.array([0.78, 0.40, 0.18]) * rng.uniform(0.85, 1.1)
    shade = (1.0 - 0.45 * r2)[None] * base[:, None, None]
    image = np.where(disc[None], shade, 0.03)

    drawn = lesion_counts(cfg, rng)
    if counts is not None:
        drawn = np.asarray(counts, dtype=np.int64)
    mask = np.zeros((total, total), dtype=np.uint8)
    lesions = []
    for cls in range(1, NUM_SEG_CLASSES):
        for _ in range(int(drawn[cls - 1])):
            les = _lesion(cls, rng, yy, xx, disc, cy, cx, radius)
            color = np.array(_COLORS[cls])[:, None, None]
            image = image * (1 - les.alpha) + color * les.alpha
            mask[les.footprint] = cls
            lesions.append(les)
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    counts_t = tuple(int(v) for v in drawn)
    sample = Sample(image, mask, grade_from_lesions(counts_t), False, counts_t)
    return sample, lesions, disc


def generate_sample(cfg: DataConfig, seed: int, index: int) -> Sample:
    """Deterministic function of (seed, index)."""
    return render_sample(cfg, seed, index)[0]


def generate_dataset(cfg: DataConfig, start: int = 0, count: int | None = None) -> Dataset:
    count = cfg.n_train + cfg.n_val - start if count is None else count
    idx = np.arange(start, start + count)
    samples = [generate_sample(cfg, cfg.seed, int(i)) for i in idx]
    return Dataset.from_samples(samples, idx, meta={"n_train": cfg.n_train, "n_val": cfg.n_val, "seed": cfg.seed})


def generate_splits(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    """Train uses indices 0..n_train-1, validation n_train..n_train+n_val-1."""
    return generate_dataset(cfg, 0, cfg.n_train), generate_dataset(cfg, cfg.n_train, cfg.n_val)


# ---------------------------------------------------------------- persistence


def _write_pnm(path: Path, magic: bytes, maxval: int, payload: np.ndarray, width: int, height: int) -> None:
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    path.write_bytes(header + payload.tobytes())


def write_ppm16(path, image: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> binary PPM with 16-bit big-endian samples."""
    q = np.round(np.clip(image, 0.0, 1.0) * 65535).astype(">u2")
    _write_pnm(Path(path), b"P6", 65535, q.transpose(1, 2, 0), image.shape[2], image.shape[1])


def write_pgm8(path, mask: np.ndarray) -> None:
    _write_pnm(Path(path), b"P5", 255, mask.astype(np.uint8), mask.shape[1], mask.shape[0])


def _read_pnm(path) -> tuple[bytes, int, int, int, bytes, int]:
    path = Path(path)
    raw = path.read_bytes()
    pos = 0
    fields = []
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(path, start, "truncated header")
        fields.append((start, raw[start:pos]))
    if pos >= len(raw):
        raise DatasetFormatError(path, pos, "missing pixel data")
    pos += 1
    magic = fields[0][1]
    values = []
    for off, tok in fields[1:]:
        if not tok.isdigit():
            raise DatasetFormatError(path, off, f"expected integer, got {tok[:16]!r}")
        values.append(int(tok))
    width, height, maxval = values
    return magic, width, height, maxval, raw, pos


def read_ppm16(path) -> np.ndarray:
    magic, width, height, maxval, raw, pos = _read_pnm(path)
    if magic != b"P6":
        raise DatasetFormatError(path, 0, f"expected P6, got {magic!r}")
    if maxval != 65535:
        raise DatasetFormatError(path, pos - 1, f"expected 16-bit maxval 65535, got {maxval}")
    need = width * height * 3 * 2
    if len(raw) - pos < need:
        raise DatasetFormatError(path, len(raw), f"pixel data truncated: need {need} bytes after offset {pos}")
    q = np.frombuffer(raw, dtype=">u2", count=width * height * 3, offset=pos)
    return (q.reshape(height, width, 3).transpose(2, 0, 1) / 65535.0).astype(np.float32)


def read_pgm8(path) -> np.ndarray:
    magic, width, height, maxval, raw, pos = _read_pnm(path)
    if magic != b"P5":
        raise DatasetFormatError(path, 0, f"expected P5, got {magic!r}")
    if maxval > 255:
        raise DatasetFormatError(path, pos - 1, f"expected 8-bit maxval, got {maxval}")
    need = width * height
    if len(raw) - pos < need:
        raise DatasetFormatError(path, len(raw), f"pixel data truncated: need {need} bytes after offset {pos}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def save_dataset(dataset: Dataset, directory) -> None:
    """Write images/NNNNNN.ppm, masks/NNNNNN.pgm and labels.csv under ``directory``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "grade", "corrupted"])
    for row in range(len(dataset)):
        idx = int(dataset.indices[row])
        write_ppm16(root / "images" / f"{idx:06d}.ppm", dataset.images[row])
        write_pgm8(root / "masks" / f"{idx:06d}.pgm", dataset.masks[row])
        writer.writerow([idx, int(dataset.grades[row]), int(bool(dataset.corrupted[row]))])
    (root / "labels.csv").write_text(buf.getvalue())
    if dataset.meta:
        (root / "dataset.json").write_text(json.dumps(dataset.meta, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    labels = root / "labels.csv"
    if not labels.is_file():
        raise FileNotFoundError(f"{labels}: no such file")
    text = labels.read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "index,grade,corrupted":
        raise DatasetFormatError(labels, 0, "expected header 'index,grade,corrupted'")
    samples, indices = [], []
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        parts = line.split(",")
        try:
            idx, grade, corrupted = (int(p) for p in parts)
        except ValueError:
            raise DatasetFormatError(labels, offset, f"bad label row {line!r}") from None
        if not 0 <= grade < NUM_GRADES or corrupted not in (0, 1):
            raise DatasetFormatError(labels, offset, f"label values out of range in {line!r}")
        image = read_ppm16(root / "images" / f"{idx:06d}.ppm")
        mask = read_pgm8(root / "masks" / f"{idx:06d}.pgm")
        if mask.shape != image.shape[1:]:
            raise DatasetFormatError(root / "masks" / f"{idx:06d}.pgm", 0, "mask size differs from image")
        samples.append(Sample(image, mask, grade, bool(corrupted)))
        indices.append(idx)
        offset += len(line) + 1
    if not samples:
        raise DatasetFormatError(labels, offset, "no samples listed")
    meta = {}
    if (root / "dataset.json").is_file():
        meta = json.loads((root / "dataset.json").read_text())
    return Dataset.from_samples(samples, indices, meta)
