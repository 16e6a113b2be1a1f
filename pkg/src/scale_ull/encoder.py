"""Multilayer perceptron encoder with unit-norm output and exact gradients.

Hidden layers use ReLU; the last layer is linear and its output is projected
onto the unit sphere.  Parameters are immutable value objects: ``sgd_step``
returns a new ``EncoderParams`` with ``version`` incremented, which makes a
frozen snapshot nothing more than a read-only copy.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import DEFAULT_EPS, ShapeError, l2_normalize_rows

CHECKPOINT_MAGIC = b"SCALEENC"
CHECKPOINT_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class DivergedTrainingError(FloatingPointError):
    pass


class TraceMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderParams:
    weights: tuple  # weight[l] has shape (out_dim, in_dim)
    biases: tuple
    version: int = 0

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def digest(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()


@dataclass(frozen=True)
class ParamGrads:
    weights: tuple
    biases: tuple

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list
    activations: list  # activations[0] is the input batch
    raw_output: np.ndarray
    features: np.ndarray
    version: int


# A snapshot is an EncoderParams whose arrays are read-only.
FrozenSnapshot = EncoderParams


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def make_params(weights, biases, version: int = 0) -> EncoderParams:
    weights = tuple(_readonly(w) for w in weights)
    biases = tuple(_readonly(b) for b in biases)
    if not weights or len(weights) != len(biases):
        raise ConfigError("need one bias per weight matrix and at least one layer")
    for l, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ConfigError(f"layer {l}: bad shapes {w.shape}, {b.shape}")
        if l > 0 and weights[l - 1].shape[0] != w.shape[1]:
            raise ConfigError(f"layer {l} input dim does not match previous output dim")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ConfigError(f"layer {l}: non-finite parameters")
    return EncoderParams(weights, biases, version)


def init(layer_dims, rng: np.random.Generator, scale: float = 1.0) -> EncoderParams:
    """Uniform fan-in initialisation, zero biases.

    ``layer_dims`` lists the input dimension followed by every layer's output
    dimension, e.g. ``(2, 64, 32, 16)``.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError("layer_dims needs an input dim and at least one layer")
    if any(d <= 0 for d in dims):
        raise ConfigError("layer dims must be positive")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = scale / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return make_params(weights, biases)


def forward(p: EncoderParams, batch, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.layer_dims[0]:
        raise ShapeError(f"batch shape {x.shape} does not match input dim {p.layer_dims[0]}")
    h = x
    pre, acts = [], [x]
    last = len(p.weights) - 1
    for l, (w, b) in enumerate(zip(p.weights, p.biases)):
        a = h @ w.T + b
        pre.append(a)
        h = np.maximum(a, 0.0) if l < last else a
        acts.append(h)
    features = l2_normalize_rows(h, eps)
    return features, ForwardTrace(x, pre, acts, h, features, p.version)


def encode(p: EncoderParams, batch) -> np.ndarray:
    return forward(p, batch)[0]


def backward(p: EncoderParams, trace: ForwardTrace, grad_features, eps: float = DEFAULT_EPS) -> ParamGrads:
    """Chain rule from d(loss)/d(features) back to every parameter.

    Rows that hit the degenerate branch of the normalisation (norm < eps)
    are constant and pass no gradient.
    """
    if trace.version != p.version:
        raise TraceMismatchError(f"trace from version {trace.version}, params at {p.version}")
    g = np.asarray(grad_features, dtype=np.float64)
    if g.shape != trace.features.shape:
        raise ShapeError(f"gradient shape {g.shape} != feature shape {trace.features.shape}")

    y = trace.raw_output
    z = trace.features
    norms = np.sqrt(np.sum(y * y, axis=1))
    ok = norms >= eps
    # d z / d y = (I - z z^T) / |y|
    grad = np.zeros_like(y)
    radial = np.sum(z * g, axis=1, keepdims=True)
    grad[ok] = (g[ok] - z[ok] * radial[ok]) / norms[ok, None]

    gw, gb = [None] * len(p.weights), [None] * len(p.weights)
    for l in range(len(p.weights) - 1, -1, -1):
        if l < len(p.weights) - 1:
            grad = grad * (trace.pre_activations[l] > 0)
        gw[l] = grad.T @ trace.activations[l]
        gb[l] = grad.sum(axis=0)
        if l > 0:
            grad = grad @ p.weights[l]
    return ParamGrads(tuple(gw), tuple(gb))


def sgd_step(p: EncoderParams, g: ParamGrads, lr: float) -> EncoderParams:
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    if not np.all(np.isfinite(g.flat())):
        raise DivergedTrainingError("non-finite gradient")
    weights = [w - lr * dw for w, dw in zip(p.weights, g.weights)]
    biases = [b - lr * db for b, db in zip(p.biases, g.biases)]
    return make_params(weights, biases, p.version + 1)


def snapshot(p: EncoderParams) -> FrozenSnapshot:
    return make_params(p.weights, p.biases, p.version)


def save_checkpoint(p: EncoderParams, path) -> None:
    """Write parameters to ``path``.

    Layout, all integers little-endian:
      8 bytes   magic ``SCALEENC``
      uint32    format version
      uint32    number of entries in layer_dims (L + 1)
      uint32    each layer dim
      uint64    parameter version counter
      float64   for each layer: weight (out x in, row-major) then bias
    """
    dims = p.layer_dims
    header = CHECKPOINT_MAGIC + struct.pack(f"<II{len(dims)}IQ", CHECKPOINT_FORMAT_VERSION, len(dims), *dims, p.version)
    body = b"".join(
        np.ascontiguousarray(w, dtype="<f8").tobytes() + np.ascontiguousarray(b, dtype="<f8").tobytes()
        for w, b in zip(p.weights, p.biases)
    )
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> EncoderParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an encoder checkpoint")
    fmt, ndims = struct.unpack_from("<II", raw, 8)
    if fmt != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {fmt}")
    off = 16
    dims = struct.unpack_from(f"<{ndims}I", raw, off)
    off += 4 * ndims
    (version,) = struct.unpack_from("<Q", raw, off)
    off += 8
    expected = off + 8 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_out, fan_in)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(w)
        biases.append(b)
    return make_params(weights, biases, version)
