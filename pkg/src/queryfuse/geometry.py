"""Rigid transforms between agent frames and oriented-box BEV geometry."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-9


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.fmod(float(yaw), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    elif y > math.pi:
        y -= 2.0 * math.pi
    return y


def yaw_equal(a: float, b: float, tol: float = 1e-12) -> bool:
    return abs(normalize_yaw(a - b)) <= tol


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _check_rotation(r: np.ndarray) -> None:
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
        raise ValueError("rotation has det != +1")


@dataclass(frozen=True)
class Pose:
    """Agent pose in the world frame (the sensor-to-world transform)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_xyyaw(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "Pose":
        return cls(rot_z(yaw), np.array([x, y, z]))

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def as_transform(self) -> "Transform":
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return Transform(m)


@dataclass(frozen=True)
class Transform:
    """4x4 homogeneous rigid transform."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("transform must be 4x4")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("bottom row must be [0, 0, 0, 1]")
        _check_rotation(m[:3, :3])
        if not np.all(np.isfinite(m[:3, 3])):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "matrix", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def yaw(self) -> float:
        return math.atan2(self.matrix[1, 0], self.matrix[0, 0])

    def __matmul__(self, other: "Transform") -> "Transform":
        return compose(self, other)


def identity() -> Transform:
    return Transform(np.eye(4))


def translate(x: float, y: float, z: float) -> Transform:
    m = np.eye(4)
    m[:3, 3] = (x, y, z)
    return Transform(m)


def from_rt(rotation: np.ndarray, translation: Sequence[float]) -> Transform:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return Transform(m)


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    # products of rotations drift by ~1 ulp per step; snap back onto SO(3)
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def compose(a: Transform, b: Transform) -> Transform:
    """Return a . b (apply b first, then a)."""
    m = a.matrix @ b.matrix
    m[3] = (0.0, 0.0, 0.0, 1.0)
    if np.max(np.abs(m[:3, :3].T @ m[:3, :3] - np.eye(3))) > ORTHO_TOL * 0.5:
        m[:3, :3] = _reorthonormalize(m[:3, :3])
    return Transform(m)


def invert(t: Transform) -> Transform:
    r = t.rotation
    m = np.eye(4)
    m[:3, :3] = r.T
    m[:3, 3] = -(r.T @ t.translation)
    return Transform(m)


def relative_transform(cav_pose: Pose, ego_pose: Pose) -> Transform:
    """Transform mapping CAV-frame points into the ego frame."""
    return compose(invert(ego_pose.as_transform()), cav_pose.as_transform())


def transform_points(e: Transform, pts) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    return p @ e.rotation.T + e.translation


def random_transform(rng: np.random.Generator, scale: float = 10.0) -> Transform:
    """Uniformly random rotation (QR of a Gaussian) with Gaussian translation."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return from_rt(q, rng.standard_normal(3) * scale)


@dataclass(frozen=True)
class BBox3D:
    center: np.ndarray
    size: np.ndarray  # (length, width, height)
    yaw: float = 0.0

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        s = np.array(self.size, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(s))):
            raise ValueError("box fields must be finite")
        if np.any(s <= 0):
            raise ValueError(f"box size must be strictly positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def corners_bev(self) -> np.ndarray:
        """BEV corners, counter-clockwise, shape (4, 2)."""
        l, w = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def transformed(self, e: Transform) -> "BBox3D":
        center = transform_points(e, self.center)[0]
        return BBox3D(center, self.size, self.yaw + e.yaw)

    def same_as(self, other: "BBox3D", tol: float = 1e-12) -> bool:
        return (
            np.allclose(self.center, other.center, atol=tol, rtol=0)
            and np.allclose(self.size, other.size, atol=tol, rtol=0)
            and yaw_equal(self.yaw, other.yaw, tol)
        )


@dataclass(frozen=True)
class Polygon2D:
    vertices: np.ndarray  # (n, 2), counter-clockwise

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)


def polygon_area(vertices) -> float:
    """Signed shoelace area; positive for counter-clockwise order."""
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clipper) -> np.ndarray:
    """Sutherland-Hodgman clipping of `subject` by the convex CCW polygon `clipper`."""
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clipper, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(_intersect(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0:
                out.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _box_key(b: BBox3D) -> tuple:
    return (*b.center.tolist(), *b.size.tolist(), b.yaw)


def bev_iou(a: BBox3D, b: BBox3D) -> float:
    area_a = float(a.size[0] * a.size[1])
    area_b = float(b.size[0] * b.size[1])
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(*(a.center[:2] - b.center[:2])) > ra + rb:
        return 0.0
    if a.same_as(b, tol=0.0):
        return 1.0
    # fixed argument order makes the result bitwise symmetric
    if _box_key(b) < _box_key(a):
        a, b = b, a
    inter = max(polygon_area(clip_convex(a.corners_bev(), b.corners_bev())), 0.0)
    inter = min(inter, area_a, area_b)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)
