"""Top-k query selection, the CQF1 frame format, and payload bandwidth.

Frame layout (little-endian)::

    0   4s   magic  b"CQF1"
    4   u16  version (1)
    6   u32  agent_id
    10  u16  k
    12  u16  D
    14  u16  C
    16  f32  features   k*D  row-major
        f32  centers    k*3
        f32  scores     k*C
        f32  pose       16   (4x4 row-major)

Total length is ``16 + 4 * (k * (D + 3 + C) + 16)`` bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose

MAGIC = b"CQF1"
VERSION = 1
HEADER = struct.Struct("<4sHIHHH")
U16_MAX = 0xFFFF
U32_MAX = 0xFFFFFFFF
MEGABIT = 1_000_000


class EncodeError(ValueError):
    pass


class DecodeError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(eq=False)
class QueryPayload:
    agent_id: int
    features: np.ndarray  # (k, D) float32
    centers: np.ndarray  # (k, 3) float32, sender frame
    scores: np.ndarray  # (k, C) float32
    pose: Pose = field(default_factory=Pose)
    pose_matrix: np.ndarray | None = None  # float32 4x4 as carried on the wire

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype="<f4")
        self.centers = np.ascontiguousarray(self.centers, dtype="<f4").reshape(-1, 3)
        self.scores = np.ascontiguousarray(self.scores, dtype="<f4")
        k = self.features.shape[0]
        if self.features.ndim != 2 or self.scores.ndim != 2:
            raise ValueError("features and scores must be 2-D")
        if self.centers.shape[0] != k or self.scores.shape[0] != k:
            raise ValueError("features, centers and scores must have the same row count")
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("scores must lie in [0, 1]")
        if self.pose_matrix is None:
            self.pose_matrix = self.pose.as_transform().matrix.astype("<f4")
        self.pose_matrix = np.ascontiguousarray(self.pose_matrix, dtype="<f4").reshape(4, 4)
        # receivers only ever see the float32 pose, so the sender uses it too
        self.pose = pose_from_f32(self.pose_matrix)

    @property
    def k(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    def __eq__(self, other) -> bool:
        """Bitwise equality of every transmitted field."""
        if not isinstance(other, QueryPayload):
            return NotImplemented
        return self.agent_id == other.agent_id and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in (
                (self.features, other.features),
                (self.centers, other.centers),
                (self.scores, other.scores),
                (self.pose_matrix, other.pose_matrix),
            )
        )


def pose_from_f32(m: np.ndarray) -> Pose:
    """Snap a float32 pose matrix back onto SO(3) deterministically."""
    r = np.asarray(m[:3, :3], dtype=np.float64)
    u, _, vt = np.linalg.svd(r)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] *= -1
        rot = u @ vt
    return Pose(rot, np.asarray(m[:3, 3], dtype=np.float64))


def ranking_keys(scores: np.ndarray) -> np.ndarray:
    return np.asarray(scores).max(axis=1) if len(scores) else np.zeros(0)


def top_k_select(q, c, s, k: int, agent_id: int = 0, pose: Pose | None = None) -> QueryPayload:
    """Keep the k queries with the highest max-class score, best first.

    Ties go to the lower original index.
    """
    q = np.asarray(q)
    s = np.asarray(s)
    n = q.shape[0]
    if k < 0 or k > n:
        raise ValueError(f"k={k} outside [0, {n}]")
    keys = ranking_keys(s).astype(np.float64)
    order = np.argsort(-keys, kind="stable")[:k]
    return QueryPayload(agent_id, q[order], np.asarray(c)[order], s[order], pose or Pose())


def frame_length(k: int, dim: int, n_classes: int) -> int:
    return HEADER.size + 4 * (k * (dim + 3 + n_classes) + 16)


def serialize(p: QueryPayload) -> bytes:
    if not 0 <= p.agent_id <= U32_MAX:
        raise EncodeError(f"agent_id {p.agent_id} does not fit u32")
    for name, val in (("k", p.k), ("D", p.dim), ("C", p.n_classes)):
        if val > U16_MAX:
            raise EncodeError(f"{name}={val} does not fit u16")
    head = HEADER.pack(MAGIC, VERSION, p.agent_id, p.k, p.dim, p.n_classes)
    return b"".join(
        (head, p.features.tobytes(), p.centers.tobytes(), p.scores.tobytes(), p.pose_matrix.astype("<f4").tobytes())
    )


def deserialize(w: bytes) -> QueryPayload:
    w = bytes(w)
    if len(w) < HEADER.size:
        raise DecodeError("length", f"frame of {len(w)} bytes is shorter than the header")
    magic, version, agent_id, k, dim, n_classes = HEADER.unpack_from(w, 0)
    if magic != MAGIC:
        raise DecodeError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise DecodeError("version", f"unsupported version {version}")
    expected = frame_length(k, dim, n_classes)
    if len(w) != expected:
        raise DecodeError("length", f"expected {expected} bytes, got {len(w)}")
    off = HEADER.size

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(w, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
        return arr

    feats = take(k * dim, (k, dim))
    centers = take(k * 3, (k, 3))
    scores = take(k * n_classes, (k, n_classes))
    pose_m = take(16, (4, 4))
    if not np.array_equal(pose_m[3], [0, 0, 0, 1]):
        raise DecodeError("pose", "bottom row of the pose matrix is not [0, 0, 0, 1]")
    try:
        return QueryPayload(agent_id, feats, centers, scores, pose_matrix=pose_m)
    except ValueError as exc:
        raise DecodeError("scores", str(exc)) from exc


def write_frame(path, p: QueryPayload) -> Path:
    path = Path(path)
    if path.suffix != ".cqf":
        path = path.with_suffix(".cqf")
    path.write_bytes(serialize(p))
    return path


def read_frame(path) -> QueryPayload:
    return deserialize(Path(path).read_bytes())


def bandwidth_bits(k: int, dim: int, n_classes: int) -> int:
    """Bits of the transmitted query tensors (header and pose excluded)."""
    if min(k, dim, n_classes) < 0:
        raise ValueError("arguments must be non-negative")
    return int(k) * (int(dim) + 3 + int(n_classes)) * 32


def format_mb(bits: int) -> str:
    mb = bits / MEGABIT
    return "0 Mb" if bits == 0 else f"{mb:.3f} Mb"
