"""Pseudo-supervised contrastive loss, similarity-distillation forgetting loss
and their weighted sum, each with its exact gradient w.r.t. the features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, as_matrix, masked_softmax_rows, pairwise_dot
from .similarity import (
    PseudoPositiveSets,
    SimilarityMatrix,
    adaptive_threshold,
    pairwise_sne,
    pseudo_positive_sets,
)

PAST_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    kappa: float = 0.1
    mu: float = 0.05
    lam: float = 0.1
    per_row_threshold: bool = False
    # Use the forgetting term with the sign exactly as typeset (-KL).
    literal_forget_sign: bool = False

    def __post_init__(self):
        if self.tau <= 0 or self.kappa <= 0:
            raise ValueError("tau and kappa must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_features: np.ndarray
    components: tuple[float, float]  # (contrastive, forgetting)


def _softmax_backward(prob: np.ndarray, grad_prob: np.ndarray) -> np.ndarray:
    return prob * (grad_prob - np.sum(prob * grad_prob, axis=1, keepdims=True))


def contrastive_loss(features, gamma: PseudoPositiveSets, tau: float, n_stream: int, m_mem: int) -> LossResult:
    z = as_matrix(features)
    size = 2 * (n_stream + m_mem)
    s = 2 * n_stream
    if z.shape[0] != size:
        raise ShapeError(f"expected {size} feature rows, got {z.shape[0]}")
    if gamma.mask.shape != (s, size):
        raise ShapeError(f"positive mask shape {gamma.mask.shape} != {(s, size)}")
    counts = gamma.mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every pseudo-positive set must be non-empty")

    logits = pairwise_dot(z[:s], z) / tau
    diag = np.zeros((s, size), dtype=bool)
    diag[np.arange(s), np.arange(s)] = True
    shifted = np.where(diag, -np.inf, logits)
    top = np.max(shifted, axis=1, keepdims=True)
    log_denom = top[:, 0] + np.log(np.sum(np.exp(shifted - top), axis=1))
    log_prob = logits - log_denom[:, None]
    weights = gamma.mask / counts[:, None]
    value = float(-np.sum(np.where(gamma.mask, log_prob, 0.0) * weights))

    prob = masked_softmax_rows(logits, mask=diag)
    g_logits = np.zeros((size, size))
    g_logits[:s] = (prob - weights) / tau
    grad = (g_logits + g_logits.T) @ z
    return LossResult(value, grad, (value, 0.0))


def _floor_past(q: np.ndarray) -> np.ndarray:
    # Only entries that underflowed to zero are raised; a blanket floor would
    # make KL(p || p) nonzero wherever p itself is below the floor.
    return np.where(q > 0, q, PAST_FLOOR)


def kl_rows(p: np.ndarray, q: np.ndarray) -> float:
    """Sum over rows of KL(p_i || q_i) with 0 log 0 = 0 and zero q entries floored."""
    q = _floor_past(q)
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def forgetting_loss(features_cur, features_past, kappa: float, literal_sign: bool = False) -> LossResult:
    """KL(p || p_past) between row-normalised similarity distributions.

    Gradient flows only through the current features.  With ``literal_sign``
    the negated value (and gradient) is returned.
    """
    zc = as_matrix(features_cur)
    zp = as_matrix(features_past)
    if zc.shape != zp.shape:
        raise ShapeError(f"current {zc.shape} vs past {zp.shape}")
    cur = pairwise_sne(zc, kappa)
    past = pairwise_sne(zp, kappa)
    return _forgetting_from_sims(zc, cur, past, literal_sign)


def _forgetting_from_sims(z, cur: SimilarityMatrix, past: SimilarityMatrix, literal_sign: bool) -> LossResult:
    p = cur.row_normalized
    q = _floor_past(past.row_normalized)
    value = kl_rows(p, past.row_normalized)

    # d/dp of sum p log(p/q) is log(p/q) + 1; the constant cancels under the
    # row normalisation below, so it is dropped to keep the identical-input
    # gradient exactly zero.
    pos = p > 0
    g_p = np.zeros_like(p)
    g_p[pos] = np.log(p[pos] / q[pos])
    row_sum = np.sum(cur.symmetric_raw, axis=1, keepdims=True)
    g_sym = (g_p - np.sum(p * g_p, axis=1, keepdims=True)) / row_sum
    np.fill_diagonal(g_sym, 0.0)
    g_cond = 0.5 * (g_sym + g_sym.T)
    g_logits = _softmax_backward(cur.conditional, g_cond) / cur.kappa
    grad = (g_logits + g_logits.T) @ z
    if literal_sign:
        value, grad = -value, -grad
    return LossResult(value, grad, (0.0, value))


def total_loss(features_cur, features_past, cfg: LossConfig, n_stream: int, m_mem: int) -> LossResult:
    zc = as_matrix(features_cur)
    zp = as_matrix(features_past)
    if zc.shape != zp.shape:
        raise ShapeError(f"current {zc.shape} vs past {zp.shape}")
    sim = pairwise_sne(zc, cfg.kappa)
    thr = adaptive_threshold(sim, cfg.mu, n_stream, per_row=cfg.per_row_threshold)
    gamma = pseudo_positive_sets(sim, thr, n_stream)
    cont = contrastive_loss(zc, gamma, cfg.tau, n_stream, m_mem)
    if cfg.lam == 0:
        return cont
    forget = _forgetting_from_sims(zc, sim, pairwise_sne(zp, cfg.kappa), cfg.literal_forget_sign)
    value = cont.value + cfg.lam * forget.value
    grad = cont.grad_features + cfg.lam * forget.grad_features
    return LossResult(value, grad, (cont.value, forget.value))
