"""Symmetric-SNE pairwise similarity and pseudo-positive set construction.

Row layout of every feature matrix used here: the first ``2 * n_stream`` rows
are the augmented streaming views (views of sample ``k`` at rows ``2k`` and
``2k + 1``), the remaining rows are augmented memory views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix, masked_softmax_rows, pairwise_dot


@dataclass(frozen=True)
class SimilarityMatrix:
    conditional: np.ndarray  # p_{j|i}, rows sum to one off the diagonal
    symmetric_raw: np.ndarray  # (p_{j|i} + p_{i|j}) / 2
    row_normalized: np.ndarray  # symmetric_raw divided by its row sums
    kappa: float

    @property
    def size(self) -> int:
        return self.conditional.shape[0]


@dataclass(frozen=True)
class PseudoPositiveSets:
    mask: np.ndarray  # (2n, N) boolean; mask[i, j] <=> j in Gamma_i
    threshold_used: object  # float, or per-anchor array in per-row mode

    def members(self, i: int) -> list[int]:
        return np.flatnonzero(self.mask[i]).tolist()

    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def partner(i):
    """Index of the other augmented view of the same sample."""
    return np.bitwise_xor(i, 1)


def pairwise_sne(features, kappa: float) -> SimilarityMatrix:
    z = as_matrix(features)
    if z.shape[0] < 2:
        raise ValueError("pairwise similarity needs at least two rows")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    cond = masked_softmax_rows(pairwise_dot(z, z) / kappa, exclude_diagonal=True)
    sym = 0.5 * (cond + cond.T)
    rownorm = sym / np.sum(sym, axis=1, keepdims=True)
    return SimilarityMatrix(cond, sym, rownorm, float(kappa))


def _stream_block(sim: SimilarityMatrix, n_stream: int) -> tuple[np.ndarray, np.ndarray]:
    s = 2 * n_stream
    if n_stream <= 0:
        raise ValueError("n_stream must be positive")
    if s > sim.size:
        raise ValueError(f"2 * n_stream = {s} exceeds similarity size {sim.size}")
    block = sim.row_normalized[:s, :s]
    return block, ~np.eye(s, dtype=bool)


def adaptive_threshold(sim: SimilarityMatrix, mu: float, n_stream: int, per_row: bool = False):
    """``mean + mu * (max - mean)`` over streaming-anchor/streaming-candidate pairs.

    Statistics are global over all eligible entries by default; with
    ``per_row`` one threshold per anchor is returned instead.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    block, off = _stream_block(sim, n_stream)
    if per_row:
        vals = np.where(off, block, np.nan)
        mean = np.nanmean(vals, axis=1)
        top = np.nanmax(vals, axis=1)
        return mean + mu * (top - mean)
    vals = block[off]
    mean = float(np.mean(vals))
    return mean + mu * (float(np.max(vals)) - mean)


def pseudo_positive_sets(sim: SimilarityMatrix, threshold, n_stream: int) -> PseudoPositiveSets:
    block, off = _stream_block(sim, n_stream)
    thr = np.asarray(threshold, dtype=np.float64)
    if np.any(np.isnan(thr)):
        raise ValueError("threshold must not be NaN")
    thr_col = thr[:, None] if thr.ndim == 1 else thr
    s = 2 * n_stream
    mask = np.zeros((s, sim.size), dtype=bool)
    mask[:, :s] = (block > thr_col) & off
    idx = np.arange(s)
    mask[idx, partner(idx)] = True
    return PseudoPositiveSets(mask, threshold if thr.ndim else float(thr))


def simclr_sets(n_stream: int, size: int) -> PseudoPositiveSets:
    """Partner-only sets, i.e. the plain SimCLR positives."""
    s = 2 * n_stream
    mask = np.zeros((s, size), dtype=bool)
    idx = np.arange(s)
    mask[idx, partner(idx)] = True
    return PseudoPositiveSets(mask, float("inf"))
