"""Quaternion algebra, pinhole camera model, and the camera/body/target frame chain.

Quaternions are stored as numpy arrays ``[w, x, y, z]`` (scalar first).
Rotating a vector uses the conjugation q v q^-1, so ``quat_rotate(q_AB, v_B)``
expresses a B-frame vector in frame A.

Frames:
    camera  -- optical frame, z forward, x right, y down
    body    -- robot body, x forward, z up
    target  -- gravity-aligned frame anchored at the tracked target
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

CAMERA = "camera"
BODY = "body"
TARGET = "target"
_FRAMES = (CAMERA, BODY, TARGET)

QUAT_NORM_TOL = 1e-9


class FrameError(ValueError):
    """A point was supplied in the wrong coordinate frame."""


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_mul(q1, q2) -> np.ndarray:
    """Hamilton product q1 * q2."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by unit quaternion q (q v q^-1)."""
    w, x, y, z = q
    qv = np.array([x, y, z])
    v = np.asarray(v, dtype=float)
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def quat_from_yaw(psi: float) -> np.ndarray:
    """Zero-roll/pitch quaternion for heading psi."""
    return np.array([np.cos(0.5 * psi), 0.0, 0.0, np.sin(0.5 * psi)])


def yaw_of(q) -> float:
    """Heading angle (ZYX convention); inverse of quat_from_yaw when roll=pitch=0."""
    w, x, y, z = q
    return float(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))


def pitch_of(q) -> float:
    """Pitch angle (ZYX convention), radians."""
    w, x, y, z = q
    s = np.clip(2.0 * (w * y - z * x), -1.0, 1.0)
    return float(np.arcsin(s))


def quat_exp_tangent(theta) -> np.ndarray:
    """Unit quaternion for a small rotation vector theta (axis * angle)."""
    theta = np.asarray(theta, dtype=float)
    a = np.linalg.norm(theta)
    if a < 1e-12:
        return quat_normalize(np.concatenate([[1.0], 0.5 * theta]))
    return np.concatenate([[np.cos(0.5 * a)], np.sin(0.5 * a) * theta / a])


def quat_log_tangent(q) -> np.ndarray:
    """Rotation vector of a unit quaternion (inverse of quat_exp_tangent)."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    vn = np.linalg.norm(q[1:])
    if vn < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(vn, q[0])
    return angle * q[1:] / vn


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera rendered at a different resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height
        )


@dataclass(frozen=True)
class UnitQuaternion:
    """Validated unit quaternion wrapper used at module boundaries."""

    wxyz: np.ndarray

    def __init__(self, wxyz):
        arr = np.asarray(wxyz, dtype=float)
        if arr.shape != (4,):
            raise ValueError("quaternion must have 4 components (w, x, y, z)")
        arr = quat_normalize(arr)
        object.__setattr__(self, "wxyz", arr)

    @property
    def w(self):
        return self.wxyz[0]

    def rotate(self, v) -> np.ndarray:
        return quat_rotate(self.wxyz, v)


@dataclass(frozen=True)
class RigidTransform:
    rotation: UnitQuaternion
    translation: np.ndarray

    def __init__(self, rotation: UnitQuaternion, translation):
        t = np.asarray(translation, dtype=float)
        if t.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", t)

    def apply(self, p) -> np.ndarray:
        return self.rotation.rotate(p) + self.translation

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(UnitQuaternion(quat_identity()), np.zeros(3))


@dataclass(frozen=True)
class FramedPoint:
    coords: np.ndarray
    frame: str

    def __init__(self, coords, frame: str):
        c = np.asarray(coords, dtype=float)
        if c.shape != (3,):
            raise ValueError("coords must be a 3-vector")
        if frame not in _FRAMES:
            raise ValueError(f"unknown frame {frame!r}")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "frame", frame)

    def require(self, frame: str):
        if self.frame != frame:
            raise FrameError(f"expected point in {frame} frame, got {self.frame}")


# calibrated camera-to-body extrinsics of the reference platform: the
# camera optical axis (+z) maps to body +x (front-mounted, slightly offset)
T_BC = RigidTransform(
    UnitQuaternion(np.array([-0.5, 0.5, -0.5, 0.5])),
    np.array([0.061, 0.047, -0.065]),
)


def back_project(px, depth: float, k: CameraIntrinsics) -> FramedPoint:
    """Pixel + depth -> 3D point in the camera frame."""
    x, y = float(px[0]), float(px[1])
    if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(depth)):
        raise ValueError("non-finite back-projection input")
    if depth < 0:
        raise ValueError("depth must be non-negative")
    return FramedPoint(
        [(x - k.cx) * depth / k.fx, (y - k.cy) * depth / k.fy, depth], CAMERA
    )


def project(p: FramedPoint, k: CameraIntrinsics) -> np.ndarray:
    """3D camera-frame point -> pixel coordinates. Requires z > 0."""
    p.require(CAMERA)
    x, y, z = p.coords
    if z <= 0:
        raise ValueError("point is behind the camera")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def camera_to_body(p: FramedPoint, ext: RigidTransform) -> FramedPoint:
    p.require(CAMERA)
    return FramedPoint(ext.apply(p.coords), BODY)


def body_to_target(p: FramedPoint, att: UnitQuaternion) -> FramedPoint:
    """Robot-anchored body point -> target-centric frame: p_T = -(q_TB (*) p_B)."""
    p.require(BODY)
    return FramedPoint(-att.rotate(p.coords), TARGET)


@lru_cache(maxsize=8)
def _pixel_rays_cached(k: CameraIntrinsics) -> np.ndarray:
    xs = np.arange(k.width, dtype=float)
    ys = np.arange(k.height, dtype=float)
    u, v = np.meshgrid(xs, ys)
    d = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d.setflags(write=False)
    return d


def pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """Unit viewing rays through every pixel center, shape (H, W, 3), camera frame.

    The returned array is a cached, read-only buffer; copy before mutating.
    """
    return _pixel_rays_cached(k)
