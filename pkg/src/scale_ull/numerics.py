"""Dense kernels shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Random state is
a ``numpy.random.Generator`` backed by PCG64; child streams are derived with
``SeedSequence.spawn`` so that independent consumers never share a stream.
"""

from __future__ import annotations

import numpy as np

DEFAULT_EPS = 1e-12


class InvalidInputError(ValueError):
    """Raised when an input matrix holds NaN or infinite entries."""


class ShapeError(ValueError):
    """Raised on incompatible matrix shapes."""


class DegenerateRowError(ValueError):
    """Raised when a softmax row has every entry masked."""


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """Return ``n`` independent generators derived from ``seed``.

    Child ``i`` is always the same stream for a given seed regardless of how
    many siblings were requested.
    """
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def l2_normalize_rows(m, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Scale every row to unit Euclidean norm.

    Rows whose norm is below ``eps`` map to the first standard basis vector so
    that an all-zero encoder output never produces NaNs.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = as_matrix(m)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("non-finite entries in input matrix")
    norms = np.sqrt(np.sum(a * a, axis=1))
    out = np.empty_like(a)
    ok = norms >= eps
    out[ok] = a[ok] / norms[ok, None]
    if a.shape[1] > 0:
        out[~ok] = 0.0
        out[~ok, 0] = 1.0
    return out


def pairwise_dot(a, b) -> np.ndarray:
    """Gram matrix ``out[i, j] = a[i] . b[j]``.

    Products are accumulated one feature column at a time, left to right, so
    ``pairwise_dot(a, a)`` is exactly symmetric and results do not depend on
    BLAS blocking.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[:, k])
    return out


def masked_softmax_rows(logits, exclude_diagonal: bool = False, mask=None) -> np.ndarray:
    """Row-wise softmax with optional masking.

    ``mask`` is a boolean array of entries to exclude; ``exclude_diagonal``
    adds the diagonal to it.  Masked entries come out exactly zero.
    """
    x = as_matrix(logits)
    excluded = np.zeros(x.shape, dtype=bool) if mask is None else np.array(mask, dtype=bool)
    if exclude_diagonal:
        if x.shape[0] != x.shape[1]:
            raise ShapeError("diagonal exclusion needs a square matrix")
        np.fill_diagonal(excluded, True)
    if x.shape[1] == 0 or np.any(np.all(excluded, axis=1)):
        raise DegenerateRowError("a row has every entry masked")
    shifted = np.where(excluded, -np.inf, x)
    shifted = shifted - np.max(shifted, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)
