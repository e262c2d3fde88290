"""Facial constraint filtering: frame subsampling, face count, face
proportion and pose diversity."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from lfakit.manifest import ClipRecord, FaceObservation, FilterDecision


@dataclass(frozen=True)
class ConstraintConfig:
    sample_stride: int = 3
    min_face_proportion: float = 0.10
    min_angle_variation: float = 30.0

    def __post_init__(self):
        if self.sample_stride < 1:
            raise ValueError(f"sample_stride must be >= 1, got {self.sample_stride}")
        if not 0 < self.min_face_proportion < 1:
            raise ValueError(f"min_face_proportion must lie in (0, 1), got {self.min_face_proportion}")
        if self.min_angle_variation < 0:
            raise ValueError(f"min_angle_variation must be >= 0, got {self.min_angle_variation}")


@dataclass
class ClipFaceTrack:
    clip_id: str
    stride: int
    frames: list = field(default_factory=list)  # [(frame_index, [FaceObservation, ...]), ...]

    def __len__(self):
        return len(self.frames)

    def single_face_frames(self) -> list:
        """Sampled frames holding exactly one face, as (frame_index, face)."""
        return [(idx, faces[0]) for idx, faces in self.frames if len(faces) == 1]


def sample_frames(clip: ClipRecord, observations: Sequence[FaceObservation], stride: int) -> ClipFaceTrack:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    by_frame: dict[int, list] = {}
    for obs in observations:
        if obs.clip_id != clip.clip_id:
            raise ValueError(f"observation for {obs.clip_id!r} passed with clip {clip.clip_id!r}")
        if obs.frame_index % stride == 0:
            by_frame.setdefault(obs.frame_index, []).append(obs)
    frames = [(i, by_frame.get(i, [])) for i in range(0, clip.frame_count, stride)]
    return ClipFaceTrack(clip.clip_id, stride, frames)


def check_face_count(track: ClipFaceTrack) -> bool:
    return all(len(faces) == 1 for _, faces in track.frames)


def _single_faces(track: ClipFaceTrack) -> list:
    if not track.frames:
        raise ValueError(f"clip {track.clip_id!r}: empty track")
    faces = [face for _, face in track.single_face_frames()]
    if not faces:
        raise ValueError(f"clip {track.clip_id!r}: no sampled frame holds exactly one face")
    return faces


def face_proportion(track: ClipFaceTrack) -> float:
    """Mean face-box area (fraction of frame area) over sampled frames."""
    faces = _single_faces(track)
    return sum(f.area for f in faces) / len(faces)


def angle_variation(track: ClipFaceTrack) -> float:
    """Largest per-axis (max - min) spread of pitch, yaw and roll, in degrees."""
    faces = _single_faces(track)
    spreads = []
    for axis in ("pitch", "yaw", "roll"):
        vals = [getattr(f, axis) for f in faces]
        spreads.append(max(vals) - min(vals))
    return float(max(spreads))


def evaluate_clip(clip: ClipRecord, observations: Sequence[FaceObservation],
                  cfg: ConstraintConfig = ConstraintConfig()) -> FilterDecision:
    """Run all three constraints and collect every failure.

    Proportion and pose are measured on the sampled frames that hold exactly
    one face, so a face-count failure does not hide the other two. When no
    such frame exists they cannot be measured and MISSING_DATA is reported.
    """
    track = sample_frames(clip, observations, cfg.sample_stride)
    reasons = []
    metrics = {}
    if not check_face_count(track):
        reasons.append("FACE_COUNT")
    if track.single_face_frames():
        prop = face_proportion(track)
        var = angle_variation(track)
        metrics["mean_face_proportion"] = prop
        metrics["angle_variation_deg"] = var
        if prop < cfg.min_face_proportion:
            reasons.append("FACE_PROPORTION")
        if var < cfg.min_angle_variation:
            reasons.append("POSE_DIVERSITY")
    else:
        reasons.append("MISSING_DATA")
    return FilterDecision(clip.clip_id, not reasons, reasons, metrics)
