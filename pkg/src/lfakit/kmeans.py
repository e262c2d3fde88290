"""Seeded k-means (k-means++ init + Lloyd) used for the coarse quantizer and
the PQ codebooks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_CHUNK = 4096


@dataclass(eq=False)
class KMeansModel:
    k: int
    dim: int
    centroids: np.ndarray  # (k, dim) float32
    seed: int
    iterations_run: int = 0
    inertia: float = float("nan")
    inertia_history: list = field(default_factory=list)


def as_matrix(data) -> np.ndarray:
    """Accept an EmbeddingStore or anything array-like; return a 2-D array."""
    arr = getattr(data, "data", data)
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 64-bit child seed for a named sub-task."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *tags])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared L2 via |x|^2 - 2 x.c + |c|^2 in float64; fast, not tie-exact."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign_exact(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid by explicit differences (lowest id wins ties).

    Returns (labels, squared distances). Chunked to bound memory.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    labels = np.empty(len(x), dtype=np.int64)
    dists = np.empty(len(x), dtype=np.float64)
    step = max(1, _CHUNK * 64 // max(1, c.shape[0] * c.shape[1]))
    for start in range(0, len(x), step):
        block = x[start:start + step]
        d = ((block[:, None, :] - c[None, :, :]) ** 2).sum(-1)
        lab = d.argmin(1)
        labels[start:start + step] = lab
        dists[start:start + step] = d[np.arange(len(block)), lab]
    return labels, dists


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # fewer distinct points than k; duplicates get repaired later
            idx = int(rng.integers(n))
        chosen.append(idx)
        np.minimum(closest, ((x - x[idx]) ** 2).sum(1), out=closest)
    return x[chosen].copy()


def _repair_empty(x, labels, point_d, centroids, counts):
    for j in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        far = members[int(np.argmax(point_d[members]))]
        centroids[j] = x[far]
        labels[far] = j
        point_d[far] = 0.0
        counts[big] -= 1
        counts[j] = 1


def kmeans(data, k: int, seed: int = 0, max_iter: int = 25, tol: float = 1e-4) -> KMeansModel:
    """Lloyd iterations from a k-means++ start.

    Stops when the relative inertia change drops below ``tol`` or after
    ``max_iter`` rounds. Same data + seed gives bit-identical centroids.
    """
    x = np.asarray(as_matrix(data), dtype=np.float64)
    n, dim = x.shape
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"need N >= k, got N={n}, k={k}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, k, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = sq_distances(x, centroids)
        labels = d.argmin(1)
        point_d = d[np.arange(n), labels]
        inertia = float(point_d.sum())
        history.append(inertia)
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            _repair_empty(x, labels, point_d, centroids, counts)
        sums = np.zeros((k, dim), dtype=np.float64)
        np.add.at(sums, labels, x)
        centroids = sums / counts[:, None]
        if len(history) > 1:
            prev = history[-2]
            if prev == 0 or (prev - inertia) / prev < tol:
                break
    d = sq_distances(x, centroids)
    final = float(d.min(1).sum())
    history.append(final)
    return KMeansModel(k=k, dim=dim, centroids=centroids.astype(np.float32), seed=int(seed),
                       iterations_run=it, inertia=final, inertia_history=history)
