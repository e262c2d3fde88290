"""Two-pass identity clustering over the IVF-PQ index, identity-disjoint
splits and purity."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from lfakit.ivfpq import IvfPqIndex, default_nprobe, search
from lfakit.kmeans import as_matrix


@dataclass(frozen=True)
class ClusterConfig:
    tau_high: float = 0.75
    tau_low: float = 0.50
    knn: int = 16
    nprobe: Optional[int] = None  # None -> index default
    seed: int = 0

    def __post_init__(self):
        if not -1 < self.tau_low < self.tau_high < 1:
            raise ValueError(f"need -1 < tau_low < tau_high < 1, got {self.tau_low}, {self.tau_high}")
        if self.knn < 1:
            raise ValueError(f"knn must be >= 1, got {self.knn}")


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # labels[sample_id] -> cluster id, dense and canonical

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def members(self) -> list:
        out = [[] for _ in range(self.n_clusters)]
        for i, c in enumerate(self.labels.tolist()):
            out[c].append(i)
        return out

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)


@dataclass(frozen=True)
class SplitManifest:
    train_clusters: frozenset
    test_clusters: frozenset
    seed: int
    test_fraction: float = field(default=0.0)

    def to_json(self) -> dict:
        return {"seed": self.seed, "test_fraction": self.test_fraction,
                "test_clusters": sorted(self.test_clusters),
                "train_clusters": sorted(self.train_clusters)}


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller root wins so roots are always the smallest member
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def canonical_labels(raw) -> np.ndarray:
    """Relabel so cluster ids follow the order of each cluster's smallest member."""
    raw = np.asarray(raw)
    out = np.empty(len(raw), dtype=np.int64)
    seen: dict = {}
    for i, r in enumerate(raw.tolist()):
        if r not in seen:
            seen[r] = len(seen)
        out[i] = seen[r]
    return out


def pass_one(x: np.ndarray, index: IvfPqIndex, cfg: ClusterConfig) -> np.ndarray:
    """Connected components of the thresholded kNN graph. Candidates come from
    the index; the threshold test uses exact cosine on the stored vectors."""
    n = len(x)
    nprobe = cfg.nprobe or default_nprobe(index.nlist)
    uf = UnionFind(n)
    edges = []
    for i in range(n):
        res = search(x[i], index, cfg.knn + 1, nprobe)
        for j in res.ids.tolist():
            if j != i and float(x[i] @ x[j]) > cfg.tau_high:
                edges.append((min(i, j), j if j > i else i))
    for a, b in sorted(set(edges)):
        uf.union(a, b)
    return canonical_labels([uf.find(i) for i in range(n)])


def attach_singletons(x: np.ndarray, labels: np.ndarray, tau_low: float) -> np.ndarray:
    """Join each pass-one singleton to the closest multi-member cluster centroid
    when its cosine exceeds ``tau_low``. Centroids are fixed from pass one."""
    sizes = np.bincount(labels)
    multi = np.flatnonzero(sizes > 1)
    out = labels.copy()
    if not len(multi):
        return out
    cents = np.stack([x[labels == c].mean(0) for c in multi])
    cents /= np.linalg.norm(cents, axis=1, keepdims=True)
    for i in np.flatnonzero(sizes[labels] == 1):
        sims = cents @ x[i]
        best = int(np.argmax(sims))  # multi is ascending, so ties go to the lowest cluster
        if sims[best] > tau_low:
            out[i] = multi[best]
    return canonical_labels(out)


def cluster(store, index: IvfPqIndex, cfg: ClusterConfig = ClusterConfig()) -> ClusterAssignment:
    """Sample ids are row positions in ``store``; the index must hold the same ids."""
    x = np.asarray(as_matrix(store), dtype=np.float64)
    if len(x) == 0:
        return ClusterAssignment(np.empty(0, dtype=np.int64))
    labels = pass_one(x, index, cfg)
    return ClusterAssignment(attach_singletons(x, labels, cfg.tau_low))


def purity(assignment: ClusterAssignment, truth: Mapping) -> float:
    n = len(assignment.labels)
    if n == 0:
        raise ValueError("empty assignment")
    missing = [i for i in range(n) if i not in truth]
    if missing:
        raise KeyError(f"no truth label for samples {missing[:5]}")
    total = 0
    for members in assignment.members():
        total += Counter(truth[i] for i in members).most_common(1)[0][1]
    return total / n


def split_identities(assignment: ClusterAssignment, test_fraction: float, seed: int) -> SplitManifest:
    n = assignment.n_clusters
    if n < 2:
        raise ValueError(f"need at least 2 clusters to split, got {n}")
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    # guard against 0.7 * 10 = 7.000000000000001
    n_test = math.ceil(round(test_fraction * n, 9))
    return SplitManifest(train_clusters=frozenset(order[n_test:].tolist()),
                         test_clusters=frozenset(order[:n_test].tolist()),
                         seed=seed, test_fraction=test_fraction)
