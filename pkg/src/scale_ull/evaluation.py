"""Frozen-model evaluation: kNN accuracy and clustering accuracy (ACC).

ACC is the best accuracy over one-to-one cluster-to-label maps, solved as a
linear assignment on the contingency table.  Clustering is spectral by
default (normalised Laplacian, eigenvectors by parallel-ordered cyclic
Jacobi rotations) with a k-means fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import as_matrix, l2_normalize_rows, pairwise_dot

SPECTRAL_MAX_ROWS = 2000


@dataclass(frozen=True)
class EvalSet:
    samples: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape[0] != self.samples.shape[0]:
            raise ValueError("one label per sample required")
        counts = np.bincount(labels)
        if np.any(counts != counts[0]):
            raise ValueError(f"evaluation set must be class-balanced, got counts {counts.tolist()}")

    @property
    def num_classes(self) -> int:
        return int(np.max(self.labels)) + 1


@dataclass(frozen=True)
class AssignmentResult:
    mapping: dict  # cluster id -> label
    acc: float


# --- kNN -------------------------------------------------------------------


def knn_predict(ref_feats, ref_labels, query_feats, k: int) -> np.ndarray:
    """Cosine-similarity kNN with majority vote.

    Vote ties go to the label with the larger summed similarity, then to the
    lower label id.  ``k`` larger than the reference set is clamped.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    ref_labels = np.asarray(ref_labels, dtype=np.int64)
    sims = pairwise_dot(as_matrix(query_feats), as_matrix(ref_feats))
    k = min(k, sims.shape[1])
    n_labels = int(ref_labels.max()) + 1
    preds = np.empty(sims.shape[0], dtype=np.int64)
    for q in range(sims.shape[0]):
        nn = np.argsort(-sims[q], kind="stable")[:k]
        votes = np.bincount(ref_labels[nn], minlength=n_labels)
        mass = np.bincount(ref_labels[nn], weights=sims[q, nn], minlength=n_labels)
        # lexsort: last key is primary
        order = np.lexsort((np.arange(n_labels), -mass, -votes))
        preds[q] = order[0]
    return preds


# --- k-means ---------------------------------------------------------------


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.shape[0])]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(rng.choice(x.shape[0], p=d2 / total))
        else:
            i = int(rng.integers(x.shape[0]))
        centers.append(x[i])
        d2 = np.minimum(d2, np.sum((x - x[i]) ** 2, axis=1))
    return np.array(centers)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)


def kmeans_cluster(
    feats, T: int, rng: np.random.Generator, iters: int = 100, tol: float = 1e-8, history: list | None = None
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is re-seeded at the point farthest from its assigned
    centre.  If ``history`` is given, the inertia after every assignment
    step is appended to it.
    """
    x = as_matrix(feats)
    if not 1 <= T <= x.shape[0]:
        raise ValueError(f"cluster count {T} must lie in [1, {x.shape[0]}]")
    centers = _kmeans_pp(x, T, rng)
    ids = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(iters):
        d = _sq_dists(x, centers)
        ids = np.argmin(d, axis=1)
        if history is not None:
            history.append(float(d[np.arange(x.shape[0]), ids].sum()))
        new = centers.copy()
        for c in range(T):
            pts = x[ids == c]
            if len(pts):
                new[c] = pts.mean(axis=0)
            else:
                far = int(np.argmax(d[np.arange(x.shape[0]), ids]))
                new[c] = x[far]
                ids[far] = c
        shift = float(np.max(np.sqrt(np.sum((new - centers) ** 2, axis=1))))
        centers = new
        if shift < tol:
            break
    return np.argmin(_sq_dists(x, centers), axis=1)


# --- spectral clustering ---------------------------------------------------


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every (p, q) once over n - 1 rounds (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        a = np.array(players[:half])
        b = np.array(players[half:][::-1])
        rounds.append((np.minimum(a, b), np.maximum(a, b)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _rotate_rows(a: np.ndarray, p, q, c, s) -> np.ndarray:
    rows_p, rows_q = a[p], a[q]
    a[p] = c[:, None] * rows_p - s[:, None] * rows_q
    a[q] = s[:, None] * rows_p + c[:, None] * rows_q
    return a


def jacobi_eigh(a, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once.  Pairs are grouped into
    rounds of disjoint rotations (round-robin ordering) so a whole round is
    applied with vectorised row and column updates.  Iteration stops when
    the off-diagonal Frobenius norm drops below ``tol`` times the matrix
    norm.  Returns eigenvalues ascending and eigenvectors as columns.
    """
    a = np.array(as_matrix(a), copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("square matrix required")
    if n == 1:
        return a.diagonal().copy(), np.ones((1, 1))
    pad = n % 2
    if pad:
        a = np.pad(a, ((0, 1), (0, 1)))
    size = n + pad
    vt = np.eye(size)  # eigenvectors stored as rows
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    rounds = _round_robin(size)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            with np.errstate(over="ignore"):
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A' = J^T A J = J^T (J^T A)^T for symmetric A: two row rotations
            a = _rotate_rows(a, p, q, c, s).T.copy()
            a = _rotate_rows(a, p, q, c, s)
            vt = _rotate_rows(vt, p, q, c, s)
    # a zero padding row never rotates, so its eigenpair separates exactly
    vals = np.diag(a)[:n].copy()
    vecs = vt[:n, :n].T
    order = np.argsort(vals, kind="stable")
    return vals[order], vecs[:, order]


def normalized_laplacian(feats, sigma: float = 0.1) -> np.ndarray:
    z = l2_normalize_rows(as_matrix(feats))
    cos = pairwise_dot(z, z)
    aff = np.exp((cos - 1.0) / sigma)  # constant factor exp(1/sigma) cancels in D^-1/2 A D^-1/2
    np.fill_diagonal(aff, 0.0)
    d = np.sum(aff, axis=1)
    inv = 1.0 / np.sqrt(np.maximum(d, np.finfo(float).tiny))
    # inv_i * inv_j is commutative elementwise, so the result is exactly symmetric
    return np.eye(len(d)) - aff * np.multiply.outer(inv, inv)


def spectral_cluster(
    feats, T: int, rng: np.random.Generator, sigma: float = 0.1, max_rows: int = SPECTRAL_MAX_ROWS
) -> np.ndarray:
    x = as_matrix(feats)
    if x.shape[0] > max_rows:
        raise ValueError(f"spectral clustering capped at {max_rows} rows, got {x.shape[0]}")
    lap = normalized_laplacian(x, sigma)
    _, vecs = jacobi_eigh(lap)
    emb = l2_normalize_rows(vecs[:, :T])
    return kmeans_cluster(emb, T, rng)


# --- ACC -------------------------------------------------------------------


def contingency(pred, true, T: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("pred and true must have equal length")
    for name, arr in (("pred", pred), ("true", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= T):
            raise ValueError(f"{name} labels must lie in [0, {T})")
    table = np.zeros((T, T), dtype=np.int64)
    np.add.at(table, (pred, true), 1)
    return table


def acc_hungarian(pred, true, T: int) -> AssignmentResult:
    table = contingency(pred, true, T)
    rows, cols = linear_sum_assignment(table, maximize=True)
    total = max(int(table.sum()), 1)
    return AssignmentResult(
        {int(r): int(c) for r, c in zip(rows, cols)}, float(table[rows, cols].sum()) / total
    )


# --- protocol --------------------------------------------------------------


def stratified_halves(labels, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split into (reference, query) index arrays."""
    labels = np.asarray(labels)
    ref, query = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        half = len(idx) // 2
        ref.append(idx[:half])
        query.append(idx[half:])
    return np.sort(np.concatenate(ref)), np.sort(np.concatenate(query))


def evaluate_features(
    feats, labels, T: int, k: int, rng: np.random.Generator, clustering: str = "spectral", sigma: float = 0.1
) -> tuple[float, float]:
    """Return ``(acc, knn_acc)`` for precomputed unit-norm features."""
    labels = np.asarray(labels, dtype=np.int64)
    cluster_rng, split_rng = rng.spawn(2)
    if clustering == "spectral":
        ids = spectral_cluster(feats, T, cluster_rng, sigma)
    elif clustering == "kmeans":
        ids = kmeans_cluster(feats, T, cluster_rng)
    else:
        raise ValueError(f"unknown clustering method {clustering!r}")
    acc = acc_hungarian(ids, labels, T).acc
    ref, query = stratified_halves(labels, split_rng)
    pred = knn_predict(feats[ref], labels[ref], feats[query], k)
    knn_acc = float(np.mean(pred == labels[query]))
    return acc, knn_acc


def evaluate(params, eval_set: EvalSet, T: int, k: int, rng: np.random.Generator, clustering: str = "spectral",
             sigma: float = 0.1) -> tuple[float, float]:
    from .encoder import encode

    feats = encode(params, eval_set.samples)
    return evaluate_features(feats, eval_set.labels, T, k, rng, clustering, sigma)
