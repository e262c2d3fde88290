"""Per-clip identity consistency: pairwise cosine similarity of frame
embeddings and the mean off-diagonal retention gate."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from lfakit.manifest import EmbeddingStore

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.6


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ConsistencyReport:
    clip_id: str
    n_embeddings: int
    mean_similarity: Optional[float]
    retained: bool
    n_skipped: int = 0


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    aa, bb = float(a @ a), float(b @ b)
    if aa == 0.0 or bb == 0.0:
        raise ValueError("zero-norm vector")
    return float(np.clip((a @ b) / np.sqrt(aa * bb), -1.0, 1.0))


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity of the rows of ``x`` (64-bit, clamped).

    Normalizing by sqrt(|a|^2 |b|^2) rather than |a| |b| keeps identical
    rows at exactly 1.0. The result is mirrored from the upper triangle so it
    is exactly symmetric.
    """
    x = np.asarray(x, dtype=np.float64)
    gram = x @ x.T
    sq = np.diag(gram).copy()
    if np.any(sq == 0.0):
        raise ValueError(f"zero-norm row at position {int(np.argmax(sq == 0.0))}")
    cos = gram / np.sqrt(np.outer(sq, sq))
    upper = np.triu(cos)
    cos = upper + np.triu(cos, 1).T
    return np.clip(cos, -1.0, 1.0)


def similarity_matrix(rows: Sequence[int], store: EmbeddingStore) -> SimilarityMatrix:
    rows = list(rows)
    if len(rows) < 2:
        raise ValueError(f"need at least 2 embeddings, got {len(rows)}")
    bad = [r for r in rows if not 0 <= r < store.rows]
    if bad:
        raise IndexError(f"embedding rows out of range: {bad[:5]}")
    return SimilarityMatrix(cosine_matrix(store.data[rows]))


def mean_off_diagonal(m: SimilarityMatrix) -> float:
    n = m.n
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    off = ~np.eye(n, dtype=bool)
    return float(m.values[off].sum() / (n * (n - 1)))


def retains(mean_similarity: float, threshold: float = DEFAULT_THRESHOLD, strict: bool = True) -> bool:
    return mean_similarity > threshold if strict else mean_similarity >= threshold


def consistency_gate(clip_id: str, rows: Sequence[Optional[int]], store: EmbeddingStore,
                     threshold: float = DEFAULT_THRESHOLD, strict: bool = True) -> ConsistencyReport:
    """Score a clip's frames; ``None`` rows (frames without embeddings) are skipped."""
    present = [r for r in rows if r is not None]
    skipped = len(rows) - len(present)
    if skipped:
        logger.warning("clip %s: %d sampled frame(s) without embeddings skipped", clip_id, skipped)
    if len(present) < 2:
        return ConsistencyReport(clip_id, len(present), None, False, skipped)
    s = mean_off_diagonal(similarity_matrix(present, store))
    return ConsistencyReport(clip_id, len(present), s, retains(s, threshold, strict), skipped)
