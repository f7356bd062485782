"""Camera model, rigid transforms and the small geometric kernels shared by every module.

Poses map world (mesh) coordinates to camera coordinates::

    p_cam = R @ p_world + t

Rotations are stored as unit quaternions ``(w, x, y, z)``; optimizer updates use a
6-vector ``(omega, v)`` applied on the left of the camera frame, ``p' = Exp(omega) p + v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class GeometryError(Exception):
    pass


class BehindCamera(GeometryError):
    pass


class DegenerateParallax(GeometryError):
    pass


class PixelOutOfBounds(GeometryError, ValueError):
    pass


# ---------------------------------------------------------------------------
# rotations


def hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + math.sin(theta) / theta * K + (1.0 - math.cos(theta)) / theta**2 * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    q = matrix_to_quat(R)
    return quat_to_rotvec(q)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = q if q[0] >= 0 else -q
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * math.atan2(s, q[0])
    return q[1:] / s * angle


def rotvec_to_quat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        q = np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
    else:
        s = math.sin(0.5 * theta) / theta
        q = np.array([math.cos(0.5 * theta), w[0] * s, w[1] * s, w[2] * s])
    return q / np.linalg.norm(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method; projects a slightly non-orthonormal input onto SO(3) via normalization
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


# ---------------------------------------------------------------------------
# poses


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform (unit quaternion + translation)."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("invalid quaternion")
        q = q / n
        if q[0] < 0:
            q = -q
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)
        R = quat_to_matrix(q)
        R.flags.writeable = False
        object.__setattr__(self, "_R", R)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t: Sequence[float]) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls.from_rt(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, w: Sequence[float], t: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        return cls(rotvec_to_quat(np.asarray(w, dtype=float)), t)

    @property
    def rotation(self) -> np.ndarray:
        return self._R

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self._R
        M[:3, 3] = self.translation
        return M

    def row_major_3x4(self) -> list[float]:
        return [float(v) for v in self.matrix()[:3].ravel()]

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other`` (apply ``other`` first)."""
        return Pose(quat_mul(self.quat, other.quat), self._R @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        q = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q, -(self._R.T @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self._R.T + self.translation

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -(self._R.T @ self.translation)

    def retract(self, delta: np.ndarray) -> "Pose":
        """Left update ``p' = Exp(omega) p + v`` with ``delta = (omega, v)``."""
        delta = np.asarray(delta, dtype=float)
        dq = rotvec_to_quat(delta[:3])
        dR = quat_to_matrix(dq)
        return Pose(quat_mul(dq, self.quat), dR @ self.translation + delta[3:])

    def rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.quat)

    def __repr__(self) -> str:
        return f"Pose(rotvec={np.round(self.rotvec(), 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def rotation_error(a: Pose, b: Pose) -> float:
    """Geodesic angle (radians) between the rotations of two poses."""
    dq = quat_mul(a.quat * np.array([1.0, -1.0, -1.0, -1.0]), b.quat)
    return 2.0 * math.atan2(float(np.linalg.norm(dq[1:])), abs(float(dq[0])))


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, -1.0, 0.0)) -> Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target`` (camera y points down)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    x = np.cross(-up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose.from_rt(R, -R @ eye)


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        return (
            (pixels[..., 0] >= 0)
            & (pixels[..., 0] <= self.width - 1)
            & (pixels[..., 1] >= 0)
            & (pixels[..., 1] <= self.height - 1)
        )

    def shifted(self, dx: float = 0.0, dy: float = 0.0) -> "Intrinsics":
        return Intrinsics(self.fx, self.fy, self.cx + dx, self.cy + dy, self.width, self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d / np.linalg.norm(d))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


MIN_DEPTH = 1e-9


def project_point(pose: Pose, k: Intrinsics, point: Sequence[float]) -> np.ndarray:
    pc = pose.apply(np.asarray(point, dtype=float))
    if pc[2] <= MIN_DEPTH:
        raise BehindCamera(f"camera-frame depth {pc[2]:.3g}")
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def project_points(pose: Pose, k: Intrinsics, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns ``(pixels, in_front)``. Pixels behind the camera are NaN."""
    pc = pose.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    front = pc[:, 2] > MIN_DEPTH
    z = np.where(front, pc[:, 2], np.nan)
    uv = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], axis=1)
    return uv, front


def ray_through_pixel(pose: Pose, k: Intrinsics, pixel: Sequence[float]) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    if not k.contains(np.array([u, v])):
        raise PixelOutOfBounds(f"pixel ({u}, {v}) outside {k.width}x{k.height}")
    d_cam = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    R = pose.rotation
    return Ray(pose.center(), R.T @ d_cam)


def rays_through_pixels(pose: Pose, k: Intrinsics, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-frame ray origin (shared) and unit directions for many pixels."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    d = np.stack([(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy, np.ones(len(pixels))], axis=1)
    d = d @ pose.rotation
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return pose.center(), d


class Hit(NamedTuple):
    t: float
    barycentric: np.ndarray


def ray_triangle_intersect(ray: Ray, v0, v1, v2, eps: float = 1e-12) -> Optional[Hit]:
    """Möller-Trumbore. Returns ``None`` on a miss (parallel, behind the origin, outside)."""
    v0 = np.asarray(v0, dtype=float)
    e1 = np.asarray(v1, dtype=float) - v0
    e2 = np.asarray(v2, dtype=float) - v0
    p = np.cross(ray.direction, e2)
    det = float(e1 @ p)
    if abs(det) < eps * max(1.0, float(np.linalg.norm(e1) * np.linalg.norm(e2))):
        return None
    inv = 1.0 / det
    s = ray.origin - v0
    b1 = float(s @ p) * inv
    if b1 < 0.0 or b1 > 1.0:
        return None
    q = np.cross(s, e1)
    b2 = float(ray.direction @ q) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return None
    t = float(e2 @ q) * inv
    if t <= MIN_DEPTH:
        return None
    return Hit(t, np.array([b1, b2]))


class Triangulation(NamedTuple):
    point: np.ndarray
    parallax_deg: float


def parallax_angle(center_a: np.ndarray, center_b: np.ndarray, point: np.ndarray) -> float:
    da = point - center_a
    db = point - center_b
    c = float(da @ db / (np.linalg.norm(da) * np.linalg.norm(db)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def triangulate(
    pose_a: Pose,
    pose_b: Pose,
    pixel_a: Sequence[float],
    pixel_b: Sequence[float],
    k: Intrinsics,
    min_parallax_deg: float = 0.5,
) -> Triangulation:
    """Linear (DLT) two-view triangulation with a parallax gate."""
    for px in (pixel_a, pixel_b):
        if not k.contains(np.asarray(px, dtype=float)):
            raise PixelOutOfBounds(f"pixel {tuple(px)} outside image")
    if np.linalg.norm(pose_a.center() - pose_b.center()) < 1e-12:
        raise DegenerateParallax("zero baseline")
    # gate on the angle between the viewing rays first
    ra = ray_through_pixel(pose_a, k, pixel_a)
    rb = ray_through_pixel(pose_b, k, pixel_b)
    ray_angle = math.degrees(math.acos(min(1.0, max(-1.0, float(ra.direction @ rb.direction)))))
    if ray_angle < min_parallax_deg:
        raise DegenerateParallax(f"ray angle {ray_angle:.3f} deg")
    Kn = k.K
    rows = []
    for pose, (u, v) in ((pose_a, pixel_a), (pose_b, pixel_b)):
        P = Kn @ pose.matrix()[:3]
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.array(rows)
    # column scaling improves conditioning for large coordinates
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    _, _, Vt = np.linalg.svd(A / scale)
    X = Vt[-1] / scale
    if abs(X[3]) < 1e-14:
        raise DegenerateParallax("point at infinity")
    X = X[:3] / X[3]
    par = parallax_angle(pose_a.center(), pose_b.center(), X)
    if par < min_parallax_deg:
        raise DegenerateParallax(f"parallax {par:.3f} deg")
    if pose_a.apply(X)[2] <= MIN_DEPTH or pose_b.apply(X)[2] <= MIN_DEPTH:
        raise DegenerateParallax("triangulated point behind a camera")
    return Triangulation(X, par)
