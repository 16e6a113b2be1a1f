"""Datasets, single-pass stream construction and two-view augmentation.

Stream kinds:

``iid``     all drawn samples shuffled together.
``seq``     classes one after another, each shuffled internally.
``seq_bl``  ``seq`` with blurred boundaries: inside the last/first 25% of two
            neighbouring classes, mirrored position pairs are swapped with a
            probability that rises linearly from 0.05 at the window edge to
            0.5 next to the boundary.
``seq_im``  ``seq`` where class ``t`` contributes V_t ~ U{ceil(U/2), ..., U}
            samples.
``seq_cc``  classes grouped two by two; each group is shuffled internally and
            groups arrive in order.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import as_matrix

STREAM_KINDS = ("iid", "seq", "seq_bl", "seq_im", "seq_cc")
AUG_MODES = ("vector_jitter", "grayscale_image", "rgb_image")

IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
CIFAR_RECORD = 3073
DATASET_MAGIC = b"SCALEDS1"


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray  # (count, dim) float64
    labels: np.ndarray  # (count,) int64
    image_shape: tuple | None = None  # (H, W) or (C, H, W) for image data

    def __post_init__(self):
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError("samples and labels differ in length")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class StreamSpec:
    kind: str = "seq"
    T: int = 4
    U: int = 800
    n: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STREAM_KINDS:
            raise ValueError(f"unknown stream kind {self.kind!r}")
        if min(self.T, self.U, self.n) < 1:
            raise ValueError("T, U and n must all be at least 1")


@dataclass(frozen=True)
class StreamBatch:
    samples: np.ndarray
    labels: np.ndarray  # hidden provenance, diagnostics only
    indices: np.ndarray  # row indices into the source dataset

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class Augmenter:
    mode: str = "vector_jitter"
    noise_sigma: float = 0.1
    scale_range: tuple = (0.8, 1.2)
    image_shape: tuple | None = None
    crop_padding: int = 4
    flip_prob: float = 0.5
    brightness: tuple = (0.6, 1.4)
    contrast: tuple = (0.6, 1.4)
    gray_prob: float = 0.2

    def __post_init__(self):
        if self.mode not in AUG_MODES:
            raise ValueError(f"unknown augmentation mode {self.mode!r}")
        if self.noise_sigma < 0 or self.crop_padding < 0:
            raise ValueError("noise sigma and crop padding must be non-negative")
        for lo, hi in (self.scale_range, self.brightness, self.contrast):
            if lo > hi or lo < 0:
                raise ValueError("ranges must satisfy 0 <= lo <= hi")
        if not (0 <= self.flip_prob <= 1 and 0 <= self.gray_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.mode != "vector_jitter" and self.image_shape is None:
            raise ValueError("image modes need image_shape")


# --- synthetic data --------------------------------------------------------


def mixture_means(T: int, dim: int, separation: float, layout: str = "circle") -> np.ndarray:
    """Class means with nearest-neighbour distance ``separation``, centred on the origin.

    ``circle`` puts three or more classes evenly on a circle in the first two
    coordinates; ``line`` (and any case with T == 2 or dim == 1) spaces them
    along the first axis.
    """
    if layout not in ("circle", "line"):
        raise ValueError(f"unknown layout {layout!r}")
    means = np.zeros((T, dim))
    if T == 1:
        return means
    if dim == 1 or T == 2 or layout == "line":
        means[:, 0] = (np.arange(T) - (T - 1) / 2) * separation
        return means
    radius = separation / (2 * math.sin(math.pi / T))
    angle = 2 * math.pi * np.arange(T) / T
    means[:, 0] = radius * np.cos(angle)
    means[:, 1] = radius * np.sin(angle)
    return means


def gen_gaussian_mixture(T: int, U: int, dim: int, separation: float, rng: np.random.Generator,
                         offset=None, layout: str = "circle") -> LabeledDataset:
    """``U`` samples from each of ``T`` unit-variance isotropic Gaussians.

    Class means come from :func:`mixture_means`, shifted by ``offset``.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    means = mixture_means(T, dim, separation, layout)
    if offset is not None:
        means = means + np.asarray(offset, dtype=np.float64)
    labels = np.repeat(np.arange(T), U)
    samples = means[labels] + rng.standard_normal((T * U, dim))
    return LabeledDataset(samples, labels.astype(np.int64))


# --- file formats ----------------------------------------------------------


def _open_maybe_gz(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file: 2 zero bytes, dtype code, rank, big-endian uint32 dims, data."""
    with _open_maybe_gz(path) as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise DatasetFormatError(f"{path}: bad IDX magic")
    rank = raw[3]
    if len(raw) < 4 + 4 * rank:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", raw[4 : 4 + 4 * rank])
    dtype = np.dtype(IDX_DTYPES[raw[2]])
    expected = 4 + 4 * rank + dtype.itemsize * int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=4 + 4 * rank).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_idx(images_path, labels_path) -> LabeledDataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim < 2 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(f"image shape {images.shape} does not pair with label shape {labels.shape}")
    samples = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(samples, labels.astype(np.int64), tuple(images.shape[1:]))


def load_cifar10_bin(paths) -> LabeledDataset:
    """Read one or more CIFAR-10 binary batches (1 label byte + 3072 CHW pixel bytes)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    samples, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        samples.append(rec[:, 1:].astype(np.float64) / 255.0)
    return LabeledDataset(np.vstack(samples), np.concatenate(labels), (3, 32, 32))


def save_dataset(ds: LabeledDataset, path) -> None:
    """Flat file: magic ``SCALEDS1``, uint64 rows, uint64 cols (little-endian),
    rows*cols float64 samples row-major, then rows int64 labels."""
    rows, cols = ds.samples.shape
    Path(path).write_bytes(
        DATASET_MAGIC
        + struct.pack("<QQ", rows, cols)
        + np.ascontiguousarray(ds.samples, dtype="<f8").tobytes()
        + np.ascontiguousarray(ds.labels, dtype="<i8").tobytes()
    )


def load_dataset(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad dataset magic")
    rows, cols = struct.unpack_from("<QQ", raw, 8)
    if len(raw) != 24 + 8 * rows * cols + 8 * rows:
        raise DatasetFormatError(f"{path}: size does not match header")
    samples = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=24).reshape(rows, cols)
    labels = np.frombuffer(raw, dtype="<i8", count=rows, offset=24 + 8 * rows * cols)
    return LabeledDataset(samples.astype(np.float64), labels.astype(np.int64))


# --- stream construction ---------------------------------------------------


def _draw_per_class(data: LabeledDataset, T: int, U: int, rng: np.random.Generator) -> list[np.ndarray]:
    drawn = []
    for c in range(T):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) < U:
            raise ValueError(f"class {c} has {len(idx)} samples, need {U}")
        drawn.append(rng.permutation(idx)[:U])
    return drawn


def blur_boundaries(order: np.ndarray, lengths, rng: np.random.Generator, p_edge=0.05, p_boundary=0.5) -> np.ndarray:
    """Swap mirrored positions across each class boundary.

    At boundary ``b`` the window is ``w = floor(0.25 * min(len_left, len_right))``;
    position ``b - 1 - d`` swaps with ``b + d`` with probability decreasing
    linearly in ``d`` from ``p_boundary`` to ``p_edge``.
    """
    order = order.copy()
    starts = np.cumsum([0] + list(lengths))
    for t in range(1, len(lengths)):
        b = int(starts[t])
        w = int(0.25 * min(lengths[t - 1], lengths[t]))
        for d in range(w):
            frac = d / (w - 1) if w > 1 else 0.0
            if rng.random() < p_boundary + (p_edge - p_boundary) * frac:
                order[b - 1 - d], order[b + d] = order[b + d], order[b - 1 - d]
    return order


def stream_order(data: LabeledDataset, spec: StreamSpec, rng: np.random.Generator) -> np.ndarray:
    """Dataset row indices in presentation order."""
    per_class = _draw_per_class(data, spec.T, spec.U, rng)
    if spec.kind == "iid":
        return rng.permutation(np.concatenate(per_class))
    if spec.kind == "seq":
        return np.concatenate(per_class)
    if spec.kind == "seq_bl":
        return blur_boundaries(np.concatenate(per_class), [len(c) for c in per_class], rng)
    if spec.kind == "seq_im":
        low = math.ceil(0.5 * spec.U)
        return np.concatenate([c[: int(rng.integers(low, spec.U + 1))] for c in per_class])
    # seq_cc
    groups = [np.concatenate(per_class[g : g + 2]) for g in range(0, spec.T, 2)]
    return np.concatenate([rng.permutation(g) for g in groups])


def build_stream(data: LabeledDataset, spec: StreamSpec, rng: np.random.Generator) -> list[StreamBatch]:
    order = stream_order(data, spec, rng)
    return [
        StreamBatch(data.samples[chunk], data.labels[chunk], chunk)
        for chunk in (order[i : i + spec.n] for i in range(0, len(order), spec.n))
    ]


# --- augmentation ----------------------------------------------------------


def _jitter(x: np.ndarray, aug: Augmenter, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(aug.scale_range[0], aug.scale_range[1], size=(x.shape[0], 1))
    return x * scale + aug.noise_sigma * rng.standard_normal(x.shape)


def _image_view(img: np.ndarray, aug: Augmenter, rng: np.random.Generator) -> np.ndarray:
    # img: (C, H, W)
    c, h, w = img.shape
    pad = aug.crop_padding
    if pad:
        padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
        top, left = rng.integers(0, 2 * pad + 1, size=2)
        img = padded[:, top : top + h, left : left + w]
    if rng.random() < aug.flip_prob:
        img = img[:, :, ::-1]
    img = img * rng.uniform(*aug.brightness)
    mean = img.mean()
    img = (img - mean) * rng.uniform(*aug.contrast) + mean
    if c == 3 and rng.random() < aug.gray_prob:
        gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        img = np.broadcast_to(gray, img.shape)
    return np.clip(img, 0.0, 1.0)


def augment_two_views(batch, aug: Augmenter, rng: np.random.Generator) -> np.ndarray:
    """Two independent views per row, interleaved: rows 2k and 2k+1 come from row k."""
    x = as_matrix(batch)
    doubled = np.repeat(x, 2, axis=0)
    if aug.mode == "vector_jitter":
        return _jitter(doubled, aug, rng)
    shape = tuple(aug.image_shape)
    chw = shape if len(shape) == 3 else (1,) + shape
    out = np.empty_like(doubled)
    for i in range(doubled.shape[0]):
        out[i] = _image_view(doubled[i].reshape(chw), aug, rng).ravel()
    return out


def make_eval_set(data: LabeledDataset, T: int, per_class: int, rng: np.random.Generator):
    """Balanced labelled subset, ``per_class`` rows from each of the first ``T`` classes."""
    from .evaluation import EvalSet

    idx = np.sort(np.concatenate(_draw_per_class(data, T, per_class, rng)))
    return EvalSet(data.samples[idx], data.labels[idx])
