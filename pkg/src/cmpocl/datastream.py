"""Datasets, class-incremental streams and augmentation pipelines."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IMAGE_MAGIC = b"CMPD"
_IMAGE_HEADER = struct.Struct("<4sIIIII")  # magic, n, C, H, W, classes
MAX_SIDE = 32


class IngestError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class StreamConfigError(ValueError):
    pass


@dataclass
class Dataset:
    """Samples plus labels.

    ``samples`` is ``(n, dim)`` float64 for vector data or ``(n, C, H, W)``
    uint8 for images. Labels are never handed to training code; a trainer
    only ever sees :class:`MiniBatch` objects.
    """

    samples: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) < 1:
            raise ValueError("dataset must contain at least one sample")
        if len(self.samples) != len(self.labels):
            raise ValueError("samples and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.samples)

    @property
    def is_image(self) -> bool:
        return self.samples.ndim == 4

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.samples.shape[1:]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.class_count)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_vectors_csv(path, ds: Dataset):
    lines = [f"{ds.samples.shape[1]},{ds.class_count}"]
    for label, row in zip(ds.labels, ds.samples):
        lines.append(",".join([str(int(label))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def _read_vectors_csv(path) -> Dataset:
    raw = Path(path).read_bytes()
    offset = 0
    rows, labels = [], []
    dim = classes = None
    for line in raw.splitlines(keepends=True):
        text = line.strip()
        if text:
            try:
                fields = [f.strip() for f in text.decode().split(",")]
                if dim is None:
                    dim, classes = int(fields[0]), int(fields[1])
                    if len(fields) != 2 or dim < 1 or classes < 1:
                        raise ValueError
                else:
                    if len(fields) != dim + 1:
                        raise IngestError(f"expected {dim + 1} fields, got {len(fields)}", offset)
                    label = int(fields[0])
                    if not 0 <= label < classes:
                        raise IngestError(f"label {label} outside [0, {classes})", offset)
                    labels.append(label)
                    rows.append([float(v) for v in fields[1:]])
            except IngestError:
                raise
            except (ValueError, UnicodeDecodeError):
                raise IngestError("unparseable line", offset) from None
        offset += len(line)
    if dim is None:
        raise IngestError("missing header", 0)
    if not rows:
        raise IngestError("no samples", offset)
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels), classes)


def write_images_raw(path, ds: Dataset):
    n, c, h, w = ds.samples.shape
    header = _IMAGE_HEADER.pack(IMAGE_MAGIC, n, c, h, w, ds.class_count)
    body = np.ascontiguousarray(ds.samples, dtype=np.uint8).tobytes()
    labels = ds.labels.astype("<i4").tobytes()
    Path(path).write_bytes(header + body + labels)


def _downscale(images: np.ndarray) -> np.ndarray:
    n, c, h, w = images.shape
    fy, fx = -(-h // MAX_SIDE), -(-w // MAX_SIDE)
    if fy == 1 and fx == 1:
        return images
    hh, ww = h // fy, w // fx
    crop = images[:, :, :hh * fy, :ww * fx].astype(np.float64)
    pooled = crop.reshape(n, c, hh, fy, ww, fx).mean(axis=(3, 5))
    return np.clip(np.rint(pooled), 0, 255).astype(np.uint8)


def _read_images_raw(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _IMAGE_HEADER.size:
        raise IngestError("truncated header", len(raw))
    magic, n, c, h, w, classes = _IMAGE_HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise IngestError("bad magic", 0)
    pix = n * c * h * w
    offset = _IMAGE_HEADER.size
    if len(raw) < offset + pix:
        raise IngestError("truncated pixel block", len(raw))
    images = np.frombuffer(raw, dtype=np.uint8, count=pix, offset=offset).reshape(n, c, h, w)
    offset += pix
    if len(raw) != offset + 4 * n:
        raise IngestError(f"label block has {len(raw) - offset} bytes, expected {4 * n}", offset)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=offset).astype(np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        raise IngestError(f"label {labels[bad[0]]} outside [0, {classes})", offset + 4 * int(bad[0]))
    return Dataset(_downscale(images.copy()), labels, classes)


def load_dataset(path, format: str) -> Dataset:
    if format == "vectors-csv":
        return _read_vectors_csv(path)
    if format == "images-raw":
        return _read_images_raw(path)
    raise ValueError(f"unknown dataset format {format!r}")


def synth_gaussian_stream(classes: int, dim: int, samples_per_class: int, class_sep: float,
                          seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian clusters whose means have norm ``class_sep``."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = class_sep * dirs
    labels = np.repeat(np.arange(classes), samples_per_class)
    samples = means[labels] + rng.standard_normal((len(labels), dim))
    return Dataset(samples, labels, classes)


def hold_out_validation(ds: Dataset, fraction: float = 0.10, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; returns (train, validation)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    per_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.class_count)]
    exact = np.array([fraction * len(ix) for ix in per_class])
    take = np.floor(exact).astype(int)
    # largest remainder so the validation total is round(fraction * n)
    short = int(round(fraction * len(ds))) - take.sum()
    if short > 0:
        order = np.argsort(-(exact - take), kind="stable")
        for c in order[:short]:
            if take[c] < len(per_class[c]):
                take[c] += 1
    if take.sum() == 0 or take.sum() == len(ds):
        raise ValueError(f"fraction {fraction} of {len(ds)} samples leaves an empty side")
    val = np.sort(np.concatenate([ix[:k] for ix, k in zip(per_class, take)]))
    train = np.sort(np.concatenate([ix[k:] for ix, k in zip(per_class, take)]))
    return ds.subset(train), ds.subset(val)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MiniBatch:
    """What a trainer sees at one step: raw inputs and opaque sample ids."""

    inputs: np.ndarray
    sample_ids: np.ndarray
    step: int

    def __len__(self):
        return len(self.inputs)


@dataclass
class StreamPlan:
    split_assignment: np.ndarray
    split_count: int
    sample_order: np.ndarray
    batch_size: int
    seed: int

    @property
    def n_batches(self) -> int:
        return -(-len(self.sample_order) // self.batch_size)

    def batches(self, ds: Dataset) -> Iterator[MiniBatch]:
        for step in range(self.n_batches):
            ids = self.sample_order[step * self.batch_size:(step + 1) * self.batch_size]
            yield MiniBatch(ds.samples[ids], ids.copy(), step)


def build_stream(ds: Dataset, split_count: int = 20, batch_size: int = 10,
                 seed: int = 0) -> tuple[StreamPlan, Iterator[MiniBatch]]:
    """Class-incremental single-pass stream.

    Classes are shuffled and dealt round-robin into splits; samples are
    ordered split by split and shuffled within each split. Minibatches are
    cut from that order without regard to split boundaries.
    """
    if split_count > ds.class_count:
        raise StreamConfigError(f"{split_count} splits but only {ds.class_count} classes")
    if split_count < 1 or batch_size < 1:
        raise StreamConfigError("split_count and batch_size must be positive")
    rng = np.random.default_rng(seed)
    assignment = np.empty(ds.class_count, dtype=np.int64)
    assignment[rng.permutation(ds.class_count)] = np.arange(ds.class_count) % split_count
    sample_split = assignment[ds.labels]
    order = []
    for k in range(split_count):
        members = np.flatnonzero(sample_split == k)
        if members.size == 0:
            raise StreamConfigError(f"split {k} is empty")
        order.append(rng.permutation(members))
    plan = StreamPlan(assignment, split_count, np.concatenate(order), batch_size, seed)
    return plan, plan.batches(ds)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    n_patches: int = 20
    crop_scale: tuple[float, float] = (0.25, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.4
    noise_sigma: float = 0.1
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if self.n_patches < 2:
            raise ValueError("n_patches must be at least 2")

    @classmethod
    def identity(cls, n_patches: int = 20, seed: int = 0) -> "AugmentConfig":
        return cls(n_patches, (1.0, 1.0), 0.0, 0.0, 0.0, 0.0, seed)


def derive_seed(master: int, *keys) -> int:
    """64-bit seed hashed from the master seed and a key tuple."""
    payload = ":".join(str(k) for k in (master, *keys)).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _augment_vector(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = x.astype(np.float64)
    if cfg.noise_sigma:
        out = out + cfg.noise_sigma * rng.standard_normal(out.shape)
    if cfg.dropout:
        out = out * (rng.random(out.shape) >= cfg.dropout)
    return out


def _resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    c, ih, iw = img.shape
    if (ih, iw) == (h, w):
        return img
    ys = np.clip((np.arange(h) + 0.5) * ih / h - 0.5, 0, ih - 1)
    xs = np.clip((np.arange(w) + 0.5) * iw / w - 0.5, 0, iw - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, ih - 1), np.minimum(x0 + 1, iw - 1)
    wy, wx = (ys - y0)[None, :, None], (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _augment_image(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    img = x.astype(np.float64) / 255.0
    c, h, w = img.shape
    lo, hi = cfg.crop_scale
    if hi > lo or lo < 1.0:
        area = rng.uniform(lo, hi) * h * w
        log_ratio = rng.uniform(np.log(3 / 4), np.log(4 / 3))
        ratio = np.exp(log_ratio)
        ch = int(np.clip(round(np.sqrt(area / ratio)), 1, h))
        cw = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = _resize_bilinear(img[:, top:top + ch, left:left + cw], h, w)
    if cfg.flip_prob and rng.random() < cfg.flip_prob:
        img = img[:, :, ::-1]
    if cfg.brightness:
        img = img * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness, size=(c, 1, 1))
    return np.ascontiguousarray(img)


def augment(x: np.ndarray, cfg: AugmentConfig, sample_id: int, patch_idx: int, draw: int = 0) -> np.ndarray:
    """One augmented, flattened copy of ``x``; randomness keyed by ids only."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "aug", draw, int(sample_id), patch_idx))
    if x.ndim == 3:
        return _augment_image(x, cfg, rng).reshape(-1)
    return _augment_vector(x, cfg, rng).reshape(-1)


def multipatch(x: np.ndarray, cfg: AugmentConfig, sample_id: int, draw: int = 0) -> np.ndarray:
    """``cfg.n_patches`` augmented variants of ``x``, shape (N, input_dim)."""
    return np.stack([augment(x, cfg, sample_id, i, draw) for i in range(cfg.n_patches)])


def two_view(x: np.ndarray, cfg: AugmentConfig, sample_id: int, draw: int = 0) -> np.ndarray:
    return np.stack([augment(x, cfg, sample_id, i, draw) for i in range(2)])


def to_model_input(samples: np.ndarray) -> np.ndarray:
    """Un-augmented flattened inputs (images scaled to [0, 1])."""
    if samples.ndim == 4:
        return samples.reshape(len(samples), -1).astype(np.float64) / 255.0
    return samples.astype(np.float64)
