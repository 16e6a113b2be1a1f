"""Replay buffer of raw samples and the subset-selection policies that refill it.

All selectors take a candidate set of ``count`` items and return sorted
indices of the ones to keep.  Ties always resolve to the lowest index.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import encoder as enc
from .evaluation import kmeans_cluster
from .numerics import as_matrix, l2_normalize_rows, pairwise_dot

POLICIES = ("psa", "minred", "random", "kmeans", "oracle")


@dataclass
class MemoryBuffer:
    """Bounded store of raw input-space samples.

    ``labels`` carries hidden class provenance.  Only the oracle policy and
    diagnostics read it; losses never see it.
    """

    capacity: int
    items: np.ndarray
    labels: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, capacity: int, input_dim: int) -> "MemoryBuffer":
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        return cls(capacity, np.zeros((0, input_dim)), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.items.shape[0]

    def sample_batch(self, m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Uniform draw of ``min(m, len(self))`` items without replacement."""
        if m < 0:
            raise ValueError("m must be non-negative")
        k = min(m, len(self))
        idx = rng.permutation(len(self))[:k] if k else np.zeros(0, dtype=np.int64)
        labels = self.labels[idx] if self.labels is not None else None
        return self.items[idx], labels


@dataclass
class PsaPartition:
    members: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def of(cls, points: np.ndarray, members: np.ndarray) -> "PsaPartition":
        sub = points[members]
        return cls(members, sub.min(axis=0), sub.max(axis=0))

    @property
    def ranges(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diameter(self) -> float:
        return float(np.max(self.ranges)) if self.ranges.size else 0.0

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


def psa_partition(points, M: int) -> list[PsaPartition]:
    """Split ``points`` into at most ``M`` cells.

    The cell with the largest Chebyshev diameter is repeatedly cut at the
    midpoint of its widest coordinate.  Cutting stops early when every cell
    has diameter zero.
    """
    x = as_matrix(points)
    root = PsaPartition.of(x, np.arange(x.shape[0]))
    cells = [root]
    # heap of (-diameter, lowest member index, cell id)
    heap = [(-root.diameter, 0, 0)]
    while len(cells) < M and heap:
        neg_d, _, cid = heapq.heappop(heap)
        if neg_d == 0.0:
            break
        cell = cells[cid]
        j = int(np.argmax(cell.ranges))
        mid = 0.5 * (cell.lower[j] + cell.upper[j])
        coord = x[cell.members, j]
        left = PsaPartition.of(x, cell.members[coord <= mid])
        right = PsaPartition.of(x, cell.members[coord > mid])
        cells[cid] = left
        cells.append(right)
        heapq.heappush(heap, (-left.diameter, int(left.members[0]), cid))
        heapq.heappush(heap, (-right.diameter, int(right.members[0]), len(cells) - 1))
    return cells


def psa_select(features, M: int) -> list[int]:
    """Uniform subset of ``M`` rows: partition, then one representative per cell.

    The representative is the member closest (Euclidean) to the centre of its
    cell's bounding box.  If the points cannot be cut into ``M`` cells because
    too many coincide, the shortfall is filled with the lowest-index unused
    members of the largest cells.
    """
    x = as_matrix(features)
    if M < 1:
        raise ValueError("M must be at least 1")
    if x.shape[0] <= M:
        return list(range(x.shape[0]))
    cells = psa_partition(x, M)
    chosen = []
    for cell in cells:
        d = np.sum((x[cell.members] - cell.center) ** 2, axis=1)
        chosen.append(int(cell.members[int(np.argmin(d))]))
    if len(chosen) < M:
        taken = set(chosen)
        order = sorted(cells, key=lambda c: (-len(c.members), int(c.members[0])))
        spare = [int(i) for c in order for i in c.members if int(i) not in taken]
        chosen.extend(spare[: M - len(chosen)])
    return sorted(chosen)


def minred_select(features, M: int) -> list[int]:
    """Greedily discard the row with the smallest nearest-neighbour cosine distance."""
    x = as_matrix(features)
    if M < 1:
        raise ValueError("M must be at least 1")
    count = x.shape[0]
    if count <= M:
        return list(range(count))
    z = l2_normalize_rows(x)
    dist = 1.0 - pairwise_dot(z, z)
    np.fill_diagonal(dist, np.inf)
    alive = np.ones(count, dtype=bool)
    while alive.sum() > M:
        nn = np.where(alive[None, :], dist, np.inf).min(axis=1)
        nn[~alive] = np.inf
        alive[int(np.argmin(nn))] = False
    return np.flatnonzero(alive).tolist()


def random_select(count_in: int, M: int, rng: np.random.Generator) -> list[int]:
    if count_in <= M:
        return list(range(count_in))
    return sorted(rng.choice(count_in, size=M, replace=False).tolist())


def proportional_quotas(sizes, M: int) -> np.ndarray:
    """Split ``M`` slots proportionally to ``sizes`` with largest-remainder rounding."""
    sizes = np.asarray(sizes, dtype=np.int64)
    total = int(sizes.sum())
    if M >= total:
        return sizes.copy()
    exact = sizes * M / total
    quotas = np.floor(exact).astype(np.int64)
    remainder = exact - quotas
    short = M - int(quotas.sum())
    # stable sort keeps lower cluster ids first on equal remainders
    for c in np.argsort(-remainder, kind="stable")[:short]:
        quotas[c] += 1
    return quotas


def _pick_by_group(groups: np.ndarray, quotas: np.ndarray, rng: np.random.Generator) -> list[int]:
    chosen = []
    for g, q in enumerate(quotas):
        idx = np.flatnonzero(groups == g)
        if q:
            chosen.extend(rng.choice(idx, size=int(q), replace=False).tolist())
    return sorted(chosen)


def kmeans_select(features, M: int, k: int, rng: np.random.Generator) -> list[int]:
    x = as_matrix(features)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > x.shape[0]:
        raise ValueError(f"k = {k} exceeds candidate count {x.shape[0]}")
    if k == 1 or x.shape[0] <= M:
        return random_select(x.shape[0], M, rng)
    ids = kmeans_cluster(x, k, rng)
    quotas = proportional_quotas(np.bincount(ids, minlength=k), M)
    return _pick_by_group(ids, quotas, rng)


def balanced_quotas(sizes, M: int) -> np.ndarray:
    """Equal share per class, capped by class size, leftovers handed out in class order."""
    sizes = np.asarray(sizes, dtype=np.int64)
    quotas = np.zeros_like(sizes)
    left = min(M, int(sizes.sum()))
    while left > 0:
        open_ = np.flatnonzero(quotas < sizes)
        share = max(left // len(open_), 1)
        for c in open_:
            give = min(share, sizes[c] - quotas[c], left)
            quotas[c] += give
            left -= give
            if left == 0:
                break
    return quotas


def oracle_select(labels, M: int, rng: np.random.Generator) -> list[int]:
    """Class-balanced random selection using hidden labels (ablation only)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size <= M:
        return list(range(labels.size))
    classes, groups = np.unique(labels, return_inverse=True)
    quotas = balanced_quotas(np.bincount(groups, minlength=len(classes)), M)
    return _pick_by_group(groups, quotas, rng)


def select(policy: str, features, M: int, rng: np.random.Generator, labels=None, kmeans_k: int = 10) -> list[int]:
    x = as_matrix(features)
    if policy == "psa":
        return psa_select(x, M)
    if policy == "minred":
        return minred_select(x, M)
    if policy == "random":
        return random_select(x.shape[0], M, rng)
    if policy == "kmeans":
        return kmeans_select(x, M, min(kmeans_k, x.shape[0]), rng)
    if policy == "oracle":
        if labels is None:
            raise ValueError("oracle policy needs hidden labels")
        return oracle_select(labels, M, rng)
    raise ValueError(f"unknown memory policy {policy!r}; expected one of {POLICIES}")


def update(
    buf: MemoryBuffer,
    incoming,
    params: enc.EncoderParams,
    policy: str,
    rng: np.random.Generator,
    incoming_labels=None,
    kmeans_k: int = 10,
) -> MemoryBuffer:
    """Merge ``incoming`` raw samples into the buffer and shrink back to capacity.

    Candidates are embedded with the current encoder; the buffer keeps the
    raw samples of the selected candidates.
    """
    incoming = as_matrix(incoming)
    candidates = np.vstack([buf.items, incoming])
    labels = None
    if buf.labels is not None and incoming_labels is not None:
        labels = np.concatenate([buf.labels, np.asarray(incoming_labels, dtype=np.int64)])
    if candidates.shape[0] <= buf.capacity:
        return MemoryBuffer(buf.capacity, candidates, labels)
    feats = enc.encode(params, candidates)
    keep = np.asarray(select(policy, feats, buf.capacity, rng, labels, kmeans_k), dtype=np.int64)
    return MemoryBuffer(buf.capacity, candidates[keep], labels[keep] if labels is not None else None)
