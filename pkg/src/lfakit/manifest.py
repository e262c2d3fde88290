"""On-disk artifacts: clip/face manifests, the binary embedding store, reports.

Manifests and reports are JSON Lines. Embeddings live in a little-endian
binary file::

    b"LFAEMB01" | N: u64 | D: u32 | N*D float32, row-major
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

EMB_MAGIC = b"LFAEMB01"
_EMB_HEADER = struct.Struct("<QI")

REASON_CODES = (
    "FACE_COUNT",
    "FACE_PROPORTION",
    "POSE_DIVERSITY",
    "IDENTITY_CONSISTENCY",
    "MISSING_DATA",
)


class ManifestError(ValueError):
    """Structured validation error; carries the offending line/offset and field."""

    def __init__(self, message: str, *, path=None, line: Optional[int] = None,
                 field: Optional[str] = None, offset: Optional[int] = None):
        self.path = None if path is None else str(path)
        self.line = line
        self.field = field
        self.offset = offset
        where = []
        if self.path:
            where.append(self.path)
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    width: int
    height: int
    frame_count: int
    fps: float

    def to_json(self) -> dict:
        return {"clip_id": self.clip_id, "width": self.width, "height": self.height,
                "frame_count": self.frame_count, "fps": self.fps}


@dataclass(frozen=True)
class FaceObservation:
    clip_id: str
    frame_index: int
    bbox: tuple  # (x, y, w, h) as fractions of the frame
    pitch: float
    yaw: float
    roll: float
    embedding_row: Optional[int] = None

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]

    def to_json(self) -> dict:
        out = {"clip_id": self.clip_id, "frame_index": self.frame_index,
               "bbox": list(self.bbox), "pitch": self.pitch, "yaw": self.yaw,
               "roll": self.roll}
        if self.embedding_row is not None:
            out["embedding_row"] = self.embedding_row
        return out


@dataclass(frozen=True, eq=False)
class EmbeddingStore:
    """Dense N x D float32 matrix. Treated as immutable once constructed."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype="<f4")
        if arr.ndim != 2:
            raise ManifestError(f"embedding matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[1] < 2:
            raise ManifestError(f"embedding dimension must be >= 2, got {arr.shape[1]}")
        if not np.isfinite(arr).all():
            bad = int(np.argwhere(~np.isfinite(arr))[0][0])
            raise ManifestError("non-finite embedding value", field=f"row {bad}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.rows

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()

    def to_bytes(self) -> bytes:
        return EMB_MAGIC + _EMB_HEADER.pack(self.rows, self.dim) + self.data.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, path=None) -> "EmbeddingStore":
        if len(buf) < len(EMB_MAGIC) or buf[:len(EMB_MAGIC)] != EMB_MAGIC:
            raise ManifestError("bad magic; not an embedding store", path=path, offset=0)
        head_end = len(EMB_MAGIC) + _EMB_HEADER.size
        if len(buf) < head_end:
            raise ManifestError("truncated header", path=path, offset=len(buf))
        n, d = _EMB_HEADER.unpack_from(buf, len(EMB_MAGIC))
        if d < 2:
            raise ManifestError(f"header dimension {d} < 2", path=path, offset=len(EMB_MAGIC) + 8)
        expected = head_end + n * d * 4
        if len(buf) < expected:
            raise ManifestError(f"truncated payload: expected {expected} bytes, got {len(buf)}",
                                path=path, offset=len(buf))
        if len(buf) > expected:
            raise ManifestError(f"dimension mismatch with header: {len(buf) - expected} trailing bytes",
                                path=path, offset=expected)
        data = np.frombuffer(buf, dtype="<f4", offset=head_end).reshape(n, d)
        finite = np.isfinite(data)
        if not finite.all():
            flat = int(np.argmin(finite.ravel()))
            raise ManifestError(f"non-finite value at row {flat // d}, col {flat % d}",
                                path=path, offset=head_end + 4 * flat)
        return cls(data.copy())


# --- JSON Lines helpers ---------------------------------------------------

def _iter_json_lines(path):
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON ({exc.msg})", path=path, line=lineno) from None
            if not isinstance(obj, dict):
                raise ManifestError("expected a JSON object", path=path, line=lineno)
            yield lineno, obj


def _require(obj: dict, key: str, path, lineno):
    if key not in obj:
        raise ManifestError("missing required field", path=path, line=lineno, field=key)
    return obj[key]


def _int_field(obj, key, path, lineno, minimum=None):
    val = _require(obj, key, path, lineno)
    if isinstance(val, bool) or not isinstance(val, int):
        raise ManifestError(f"expected integer, got {val!r}", path=path, line=lineno, field=key)
    if minimum is not None and val < minimum:
        raise ManifestError(f"must be >= {minimum}, got {val}", path=path, line=lineno, field=key)
    return val


def _num_field(obj, key, path, lineno):
    val = _require(obj, key, path, lineno)
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ManifestError(f"expected finite number, got {val!r}", path=path, line=lineno, field=key)
    return val


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, allow_nan=False))
            fh.write("\n")


# --- clips ----------------------------------------------------------------

def parse_clip_manifest(path) -> list[ClipRecord]:
    clips: list[ClipRecord] = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_json_lines(path):
        clip_id = _require(obj, "clip_id", path, lineno)
        if not isinstance(clip_id, str) or not clip_id:
            raise ManifestError("clip_id must be a non-empty string", path=path, line=lineno, field="clip_id")
        if clip_id in seen:
            raise ManifestError(f"duplicate clip_id {clip_id!r} (first on line {seen[clip_id]})",
                                path=path, line=lineno, field="clip_id")
        width = _int_field(obj, "width", path, lineno, minimum=1)
        height = _int_field(obj, "height", path, lineno, minimum=1)
        frame_count = _int_field(obj, "frame_count", path, lineno, minimum=1)
        fps = _num_field(obj, "fps", path, lineno)
        if fps <= 0:
            raise ManifestError(f"must be > 0, got {fps}", path=path, line=lineno, field="fps")
        seen[clip_id] = lineno
        clips.append(ClipRecord(clip_id, width, height, frame_count, fps))
    return clips


def write_clip_manifest(clips: Sequence[ClipRecord], path) -> None:
    write_jsonl((c.to_json() for c in clips), path)


# --- faces ----------------------------------------------------------------

def parse_face_manifest(path, clips: Sequence[ClipRecord]) -> list[FaceObservation]:
    by_id = {c.clip_id: c for c in clips}
    faces: list[FaceObservation] = []
    for lineno, obj in _iter_json_lines(path):
        clip_id = _require(obj, "clip_id", path, lineno)
        if clip_id not in by_id:
            raise ManifestError(f"unknown clip {clip_id!r}", path=path, line=lineno, field="clip_id")
        frame_index = _int_field(obj, "frame_index", path, lineno, minimum=0)
        if frame_index >= by_id[clip_id].frame_count:
            raise ManifestError(f"frame_index {frame_index} >= frame_count {by_id[clip_id].frame_count}",
                                path=path, line=lineno, field="frame_index")
        bbox = _require(obj, "bbox", path, lineno)
        if (not isinstance(bbox, list) or len(bbox) != 4
                or any(isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v)
                       for v in bbox)):
            raise ManifestError("bbox must be [x, y, w, h] of finite numbers", path=path, line=lineno, field="bbox")
        x, y, w, h = bbox
        if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > 1 or y + h > 1:
            raise ManifestError(f"bbox {bbox} outside the unit frame", path=path, line=lineno, field="bbox")
        angles = {}
        for key in ("pitch", "yaw", "roll"):
            val = _num_field(obj, key, path, lineno)
            if not -180 <= val <= 180:
                raise ManifestError(f"angle {val} outside [-180, 180] degrees", path=path, line=lineno, field=key)
            angles[key] = val
        row = obj.get("embedding_row")
        if row is not None:
            row = _int_field(obj, "embedding_row", path, lineno, minimum=0)
        faces.append(FaceObservation(clip_id, frame_index, tuple(bbox), angles["pitch"],
                                     angles["yaw"], angles["roll"], row))
    return faces


def write_face_manifest(faces: Sequence[FaceObservation], path) -> None:
    write_jsonl((f.to_json() for f in faces), path)


def group_faces(faces: Iterable[FaceObservation]) -> dict[str, list[FaceObservation]]:
    """Group observations by clip; within a clip, order by frame (stable)."""
    groups: dict[str, list[FaceObservation]] = {}
    for f in faces:
        groups.setdefault(f.clip_id, []).append(f)
    for obs in groups.values():
        obs.sort(key=lambda f: f.frame_index)
    return groups


# --- embeddings -----------------------------------------------------------

def load_embedding_store(path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        buf = fh.read()
    return EmbeddingStore.from_bytes(buf, path=path)


def write_embedding_store(store: EmbeddingStore, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(store.to_bytes())
    os.replace(tmp, path)


# --- reports --------------------------------------------------------------

@dataclass
class FilterDecision:
    clip_id: str
    accepted: bool
    reasons: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.reasons) - set(REASON_CODES)
        if unknown:
            raise ValueError(f"unknown reason codes {sorted(unknown)}")
        self.reasons = sorted(set(self.reasons), key=REASON_CODES.index)
        if self.accepted != (not self.reasons):
            raise ValueError("accepted must hold exactly when reasons is empty")

    @property
    def first_reason(self) -> Optional[str]:
        return self.reasons[0] if self.reasons else None

    def to_json(self) -> dict:
        return {"clip_id": self.clip_id, "accepted": self.accepted,
                "reasons": list(self.reasons), "metrics": dict(self.metrics)}


def write_report(decisions: Sequence[FilterDecision], path) -> None:
    write_jsonl((d.to_json() for d in sorted(decisions, key=lambda d: d.clip_id)), path)


def read_report(path) -> list[FilterDecision]:
    out = []
    for lineno, obj in _iter_json_lines(path):
        try:
            out.append(FilterDecision(
                clip_id=_require(obj, "clip_id", path, lineno),
                accepted=bool(_require(obj, "accepted", path, lineno)),
                reasons=list(_require(obj, "reasons", path, lineno)),
                metrics=dict(obj.get("metrics") or {}),
            ))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(str(exc), path=path, line=lineno) from None
    return out


def read_jsonl(path) -> list[dict]:
    return [obj for _, obj in _iter_json_lines(path)]


def as_jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays nested in dicts/lists into plain JSON types."""
    if isinstance(obj, dict):
        return {k: as_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return as_jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
