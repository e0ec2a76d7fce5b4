"""Rigid-body pose math shared by every stage of the pipeline.

Poses are ``[x, y, z, roll, yaw, pitch]`` (meters, radians). Rotations use the
intrinsic Z-Y-X order: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``. Homogeneous
transforms are plain ``(4, 4)`` float arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9
# |R[2,0]| above this is treated as pitch = +-pi/2 (gimbal lock)
_GIMBAL_EPS = 1e-12


class InvalidTransformError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]; angles already in range are returned as is."""
    if -math.pi < a <= math.pi:
        return float(a)
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class Pose6D:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.roll, self.yaw, self.pitch)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose component in {vals}")
        for name in ("roll", "yaw", "pitch"):
            object.__setattr__(self, name, wrap_angle(float(getattr(self, name))))
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_array(cls, a) -> Pose6D:
        return cls(*(float(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll, self.yaw, self.pitch])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def rotation_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def pose_to_htm(p: Pose6D) -> np.ndarray:
    h = np.eye(4)
    h[:3, :3] = rotation_from_euler(p.roll, p.pitch, p.yaw)
    h[:3, 3] = (p.x, p.y, p.z)
    return h


def check_htm(h: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    """Return ``h`` as a float array or raise if it is not a rigid transform."""
    h = np.asarray(h, dtype=float)
    if h.shape != (4, 4) or not np.all(np.isfinite(h)):
        raise InvalidTransformError("expected a finite 4x4 matrix")
    if not np.array_equal(h[3], [0.0, 0.0, 0.0, 1.0]):
        raise InvalidTransformError(f"bottom row must be [0, 0, 0, 1], got {h[3]}")
    r = h[:3, :3]
    drift = np.linalg.norm(r.T @ r - np.eye(3))
    if drift > tol:
        raise InvalidTransformError(f"rotation block not orthonormal (drift {drift:.3g})")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise InvalidTransformError("rotation block has det != +1")
    return h


def htm_to_pose(h: np.ndarray) -> Pose6D:
    h = check_htm(h)
    r = h[:3, :3]
    cp = math.hypot(r[0, 0], r[1, 0])
    pitch = math.atan2(-r[2, 0], cp)
    if cp > _GIMBAL_EPS:
        roll = math.atan2(r[2, 1], r[2, 2])
        yaw = math.atan2(r[1, 0], r[0, 0])
    else:
        # only yaw - roll (or yaw + roll) is observable; pin roll to zero
        roll = 0.0
        yaw = math.atan2(-r[0, 1], r[1, 1])
    return Pose6D(h[0, 3], h[1, 3], h[2, 3], roll, yaw, pitch)


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = a @ b
    out[3] = (0.0, 0.0, 0.0, 1.0)
    return out


def invert(h: np.ndarray) -> np.ndarray:
    r = h[:3, :3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ h[:3, 3]
    return out


def translation(t) -> np.ndarray:
    h = np.eye(4)
    h[:3, 3] = t
    return h


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotvec_to_matrix(w) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * k
        + ((1.0 - math.cos(theta)) / theta**2) * k @ k
    )


def increment_to_htm(xi) -> np.ndarray:
    """Map a 6-vector ``[tx, ty, tz, wx, wy, wz]`` to a transform.

    Rotation is the rotation vector ``w``; translation is applied after it.
    """
    h = np.eye(4)
    h[:3, :3] = rotvec_to_matrix(xi[3:])
    h[:3, 3] = xi[:3]
    return h


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, accurate for small angles."""
    cos_t = 0.5 * (np.trace(r) - 1.0)
    sin_t = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return math.atan2(sin_t, cos_t)


def orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def position_distance(a: Pose6D, b: Pose6D) -> float:
    return math.sqrt((a.x - b.x) ** 2 + (a.y - b.y) ** 2 + (a.z - b.z) ** 2)


def angular_distance(a: Pose6D, b: Pose6D) -> float:
    ra = rotation_from_euler(a.roll, a.pitch, a.yaw)
    rb = rotation_from_euler(b.roll, b.pitch, b.yaw)
    return rotation_angle(ra.T @ rb)


def transform_points(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply ``h`` to an ``(N, 3)`` array of points."""
    return pts @ h[:3, :3].T + h[:3, 3]
