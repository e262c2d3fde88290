"""Synthetic corpora with planted ground truth.

Every clip gets independent Bernoulli draws for each violation type; the
face boxes, pose tracks and embeddings are then built with a wide margin on
the correct side of the default thresholds, so the expected filter verdict
follows from the planted flags alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lfakit.manifest import (REASON_CODES, ClipRecord, EmbeddingStore, FaceObservation,
                             write_clip_manifest, write_embedding_store, write_face_manifest,
                             write_jsonl)

# within-identity direction weight: cos(frame, identity) ~ 0.9, pairwise ~ 0.81
IDENTITY_WEIGHT = 0.9


@dataclass
class GenConfig:
    identities: int = 3
    clips_per: int = 20
    seed: int = 0
    dim: int = 512
    sample_stride: int = 3
    p_count: float = 0.1
    p_prop: float = 0.1
    p_pose: float = 0.1
    p_identity: float = 0.1
    p_missing: float = 0.05
    min_sampled: int = 8
    max_sampled: int = 24

    def __post_init__(self):
        if self.identities < 1 or self.clips_per < 1:
            raise ValueError("identities and clips_per must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        for name in ("p_count", "p_prop", "p_pose", "p_identity", "p_missing"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.min_sampled < 3 or self.max_sampled < self.min_sampled:
            raise ValueError("need 3 <= min_sampled <= max_sampled")


@dataclass
class Corpus:
    clips: list
    faces: list
    store: EmbeddingStore
    truth: list = field(default_factory=list)  # one dict per clip

    def write(self, out_dir) -> dict:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"clips": out / "clips.jsonl", "faces": out / "faces.jsonl",
                 "embeddings": out / "embeddings.bin", "truth": out / "truth.jsonl"}
        write_clip_manifest(self.clips, paths["clips"])
        write_face_manifest(self.faces, paths["faces"])
        write_embedding_store(self.store, paths["embeddings"])
        write_jsonl(self.truth, paths["truth"])
        return paths


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _frame_embedding(rng, direction):
    noise = _unit(rng, len(direction))
    noise -= (noise @ direction) * direction
    noise /= np.linalg.norm(noise)
    e = IDENTITY_WEIGHT * direction + math.sqrt(1 - IDENTITY_WEIGHT ** 2) * noise
    return e * rng.uniform(0.5, 2.0)  # arbitrary norm; consumers must normalize


def _bbox(rng, area):
    aspect = rng.uniform(1.0, 1.3)  # h / w in frame-fraction units
    w = math.sqrt(area / aspect)
    h = area / w
    x = rng.uniform(0.0, 1.0 - w)
    y = rng.uniform(0.0, 1.0 - h)
    return (round(x, 6), round(y, 6), round(w, 6), round(h, 6))


def generate_corpus(cfg: GenConfig) -> Corpus:
    rng = np.random.default_rng(cfg.seed)
    identity_dirs = [_unit(rng, cfg.dim) for _ in range(cfg.identities)]
    clips, faces, rows, truth = [], [], [], []

    def add_row(vec):
        rows.append(vec)
        return len(rows) - 1

    for ident in range(cfg.identities):
        for j in range(cfg.clips_per):
            clip_id = f"id{ident:05d}_c{j:03d}"
            n_s = int(rng.integers(cfg.min_sampled, cfg.max_sampled + 1))
            frame_count = (n_s - 1) * cfg.sample_stride + 1 + int(rng.integers(0, cfg.sample_stride))
            clips.append(ClipRecord(clip_id, 1280, 720, frame_count, 30.0))
            planted = {name: bool(rng.random() < p) for name, p in (
                ("count", cfg.p_count), ("prop", cfg.p_prop), ("pose", cfg.p_pose),
                ("identity", cfg.p_identity), ("missing", cfg.p_missing))}

            area = rng.uniform(0.02, 0.07) if planted["prop"] else rng.uniform(0.15, 0.40)
            yaw_amp = rng.uniform(5, 20) if planted["pose"] else rng.uniform(40, 80)
            pitch_amp = rng.uniform(2, 15)
            yaw_c, pitch_c = rng.uniform(-20, 20), rng.uniform(-10, 10)
            impostor = _unit(rng, cfg.dim)

            # count violations go on interior frames so the pose extremes survive
            bad_frame = int(rng.integers(1, n_s - 1)) if planted["count"] else -1
            bad_kind = "drop" if rng.random() < 0.5 else "extra"
            for s in range(n_s):
                t = s / (n_s - 1)
                fidx = s * cfg.sample_stride
                if s == bad_frame and bad_kind == "drop":
                    continue
                direction = identity_dirs[ident]
                if planted["identity"] and s >= n_s // 2:
                    direction = impostor
                with_emb = not planted["missing"] or s == 0
                row = add_row(_frame_embedding(rng, direction)) if with_emb else None
                faces.append(FaceObservation(
                    clip_id, fidx, _bbox(rng, area * rng.uniform(0.9, 1.1)),
                    pitch=round(pitch_c + pitch_amp * (t - 0.5) + rng.uniform(-1, 1), 4),
                    yaw=round(yaw_c + yaw_amp * (t - 0.5) + rng.uniform(-1, 1), 4),
                    roll=round(rng.uniform(-3, 3), 4),
                    embedding_row=row))
                if s == bad_frame:
                    other = add_row(_frame_embedding(rng, _unit(rng, cfg.dim)))
                    faces.append(FaceObservation(
                        clip_id, fidx, _bbox(rng, 0.05), pitch=0.0, yaw=round(rng.uniform(-60, 60), 4),
                        roll=0.0, embedding_row=other))

            reasons = []
            if planted["count"]:
                reasons.append("FACE_COUNT")
            if planted["prop"]:
                reasons.append("FACE_PROPORTION")
            if planted["pose"]:
                reasons.append("POSE_DIVERSITY")
            if planted["missing"]:
                reasons.append("MISSING_DATA")
            elif planted["identity"]:
                reasons.append("IDENTITY_CONSISTENCY")
            reasons.sort(key=REASON_CODES.index)
            truth.append({"clip_id": clip_id, "identity": ident, "accepted": not reasons,
                          "reasons": reasons, "planted": planted})

    data = np.asarray(rows, dtype=np.float32) if rows else np.empty((0, cfg.dim), dtype=np.float32)
    return Corpus(clips, faces, EmbeddingStore(data), truth)


def clustered_vectors(n_groups: int, per_group: int, dim: int, spread: float, seed: int = 0,
                      n_queries: int = 0):
    """Unit vectors in tight Gaussian groups (identity-like data).

    Returns (data, group labels, queries, query labels); queries are fresh
    draws around the same group centres.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_groups, dim))
    labels = np.repeat(np.arange(n_groups), per_group)
    x = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    q_labels = rng.integers(n_groups, size=n_queries)
    q = centers[q_labels] + spread * rng.standard_normal((n_queries, dim))
    if n_queries:
        q /= np.linalg.norm(q, axis=1, keepdims=True)
    return x.astype(np.float32), labels, q.astype(np.float32), q_labels


def planted_identities(n_ids: int, per_id: int, dim: int, within: float = 0.97, seed: int = 0):
    """Unit vectors with cos(sample, own centre) = ``within`` and mutually
    orthogonal identity centres. Noise is orthogonal to every centre, so
    cross-identity cosine is at most 1 - within**2 in magnitude and
    within-identity cosine is at least 2 * within**2 - 1."""
    if n_ids >= dim:
        raise ValueError("need dim > n_ids for orthogonal centres")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    centers = basis[:, :n_ids].T
    out = []
    for c in centers:
        for _ in range(per_id):
            noise = rng.standard_normal(dim)
            noise -= centers.T @ (centers @ noise)
            noise /= np.linalg.norm(noise)
            out.append(within * c + math.sqrt(1 - within ** 2) * noise)
    return np.asarray(out), np.repeat(np.arange(n_ids), per_id)


def lossless_pq_dataset(n: int = 2000, dim: int = 32, nlist: int = 20, m: int = 8, seed: int = 0):
    """Data on which IVF-PQ is lossless: every point is an exact coarse centre
    plus a residual whose subvectors come from a fixed set of 256 codewords.

    All values are small dyadic rationals, exact in float32. Points come in
    +r / -r pairs inside each list so each list mean is exactly its centre,
    and every codeword is used at least once.
    """
    if n % (2 * nlist):
        raise ValueError("n must be a multiple of 2 * nlist")
    if dim % m:
        raise ValueError("dim must be divisible by m")
    rng = np.random.default_rng(seed)
    sub = dim // m
    centers = 64.0 * rng.integers(-4, 5, size=(nlist, dim))
    half = []
    for _ in range(m):
        seen = set()
        vs = []
        while len(vs) < 128:
            v = tuple(rng.integers(-4, 5, size=sub) / 4.0)
            neg = tuple(-a for a in v)
            if v in seen or neg in seen or v == neg:
                continue
            seen.add(v)
            vs.append(v)
        half.append(np.asarray(vs))
    pairs = n // 2
    if pairs < 128:
        raise ValueError("need n >= 256 to use every codeword")
    perms = [rng.permutation(128) for _ in range(m)]
    rows = []
    per_list = pairs // nlist
    p = 0
    for c in range(nlist):
        for _ in range(per_list):
            r = np.concatenate([half[j][perms[j][(p + 37 * j) % 128]] for j in range(m)])
            rows.append(centers[c] + r)
            rows.append(centers[c] - r)
            p += 1
    return np.asarray(rows, dtype=np.float32), centers.astype(np.float32)
