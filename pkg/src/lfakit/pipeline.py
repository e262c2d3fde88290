"""Library-level pipeline stages: filter, cluster, split, stats.

The CLI is a thin wrapper over these so that CLI output and direct library
calls are identical.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from lfakit.clustering import ClusterAssignment, ClusterConfig, cluster
from lfakit.constraints import ConstraintConfig, evaluate_clip, sample_frames
from lfakit.identity import DEFAULT_THRESHOLD, consistency_gate
from lfakit.ivfpq import IvfPqIndex, build_index, default_nlist
from lfakit.manifest import (REASON_CODES, ClipRecord, EmbeddingStore, FaceObservation,
                             FilterDecision, ManifestError, group_faces)

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    identity_threshold: float = DEFAULT_THRESHOLD
    identity_strict: bool = True
    clustering: ClusterConfig = field(default_factory=ClusterConfig)
    nlist: Optional[int] = None
    m: int = 8
    granularity: str = "clip"  # "clip" | "frame"
    seed: int = 0

    def __post_init__(self):
        if self.granularity not in ("clip", "frame"):
            raise ValueError(f"granularity must be 'clip' or 'frame', got {self.granularity!r}")


def _check_rows(clip_id, rows, store):
    for r in rows:
        if r is not None and r >= store.rows:
            raise ManifestError(f"clip {clip_id!r}: embedding_row {r} out of range "
                                f"(store holds {store.rows} rows)", field="embedding_row")


def filter_clip(clip: ClipRecord, observations: Sequence[FaceObservation],
                store: Optional[EmbeddingStore], cfg: PipelineConfig) -> FilterDecision:
    decision = evaluate_clip(clip, observations, cfg.constraints)
    if store is None:
        return decision
    track = sample_frames(clip, observations, cfg.constraints.sample_stride)
    singles = track.single_face_frames()
    if not singles:
        return decision  # MISSING_DATA already recorded
    rows = [face.embedding_row for _, face in singles]
    _check_rows(clip.clip_id, rows, store)
    rep = consistency_gate(clip.clip_id, rows, store, cfg.identity_threshold, cfg.identity_strict)
    reasons = list(decision.reasons)
    metrics = dict(decision.metrics)
    if rep.mean_similarity is None:
        reasons.append("MISSING_DATA")
    else:
        metrics["mean_similarity"] = rep.mean_similarity
        if not rep.retained:
            reasons.append("IDENTITY_CONSISTENCY")
    return FilterDecision(clip.clip_id, not reasons, reasons, metrics)


def run_filter(clips: Sequence[ClipRecord], faces: Sequence[FaceObservation],
               store: Optional[EmbeddingStore], cfg: PipelineConfig = PipelineConfig()) -> list:
    groups = group_faces(faces)
    decisions = [filter_clip(c, groups.get(c.clip_id, []), store, cfg) for c in clips]
    return sorted(decisions, key=lambda d: d.clip_id)


@dataclass
class Samples:
    """Vectors fed to clustering plus where each came from."""
    vectors: np.ndarray
    clip_ids: list
    frame_indices: list  # None per entry in clip mode


def clustering_samples(clips: Sequence[ClipRecord], faces: Sequence[FaceObservation],
                       store: EmbeddingStore, accepted: set, cfg: PipelineConfig) -> Samples:
    """One unit vector per accepted clip (mean of its normalized frame
    embeddings) or per embedded frame, depending on ``cfg.granularity``."""
    groups = group_faces(faces)
    vecs, cids, fids = [], [], []
    for clip in sorted(clips, key=lambda c: c.clip_id):
        if clip.clip_id not in accepted:
            continue
        track = sample_frames(clip, groups.get(clip.clip_id, []), cfg.constraints.sample_stride)
        frames = [(idx, f.embedding_row) for idx, f in track.single_face_frames()
                  if f.embedding_row is not None]
        _check_rows(clip.clip_id, [r for _, r in frames], store)
        if not frames:
            raise ManifestError(f"accepted clip {clip.clip_id!r} has no embedded frames")
        x = store.data[[r for _, r in frames]].astype(np.float64)
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        if cfg.granularity == "clip":
            v = x.mean(0)
            vecs.append(v / np.linalg.norm(v))
            cids.append(clip.clip_id)
            fids.append(None)
        else:
            for (idx, _), v in zip(frames, x):
                vecs.append(v)
                cids.append(clip.clip_id)
                fids.append(idx)
    dim = store.dim
    arr = np.asarray(vecs, dtype=np.float32).reshape(-1, dim)
    return Samples(arr, cids, fids)


def run_cluster(vectors: np.ndarray, cfg: PipelineConfig) -> tuple[Optional[IvfPqIndex], ClusterAssignment]:
    """Build the index over unit vectors and cluster them."""
    if len(vectors) == 0:
        return None, ClusterAssignment(np.empty(0, dtype=np.int64))
    nlist = cfg.nlist if cfg.nlist is not None else default_nlist(len(vectors))
    index = build_index(vectors, nlist=nlist, m=cfg.m, seed=cfg.seed)
    return index, cluster(vectors, index, cfg.clustering)


def corpus_stats(decisions: Sequence[FilterDecision],
                 cluster_sizes: Optional[Sequence[int]] = None) -> dict:
    """Counts by first rejection reason, 10-degree angle-variation buckets,
    and the cluster-size histogram."""
    first = Counter(d.first_reason for d in decisions if not d.accepted)
    angles = [d.metrics["angle_variation_deg"] for d in decisions if "angle_variation_deg" in d.metrics]
    buckets = Counter(int(a // 10) * 10 for a in angles)
    stats = {
        "n_clips_in": len(decisions),
        "n_clips_out": sum(1 for d in decisions if d.accepted),
        "rejected_by_first_reason": {r: first.get(r, 0) for r in REASON_CODES},
        "rejected_by_reason": {r: sum(1 for d in decisions if r in d.reasons) for r in REASON_CODES},
        "angle_variation_hist": {f"{b}-{b + 10}": buckets[b] for b in sorted(buckets)},
        "angle_variation_population": len(angles),
    }
    if cluster_sizes is not None:
        sizes = Counter(int(s) for s in cluster_sizes)
        stats["cluster_size_hist"] = {str(s): sizes[s] for s in sorted(sizes)}
        stats["n_clusters"] = len(cluster_sizes)
        stats["n_samples_clustered"] = int(sum(cluster_sizes))
    return stats
