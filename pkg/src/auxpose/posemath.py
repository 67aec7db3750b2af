"""Quaternion and pose algebra.

Quaternions are stored scalar-first, [u, v1, v2, v3], canonical sign
u >= 0 (q and -q denote the same rotation).  Rotations are
de-parameterized for regression via the unit-quaternion log map
w = (v/|v|) * arccos(u), a 3-vector with |w| <= pi/2 on the canonical
sheet, and recovered with the matching exp map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# |v| below this is treated as the identity rotation to avoid 0/0
_AXIS_EPS = 1e-12

# constructor repair threshold: worse than this is a caller bug
_NORM_SLACK = 1e-6


def _check_unit(q: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"expected a 4-component quaternion, got shape {q.shape}")
    if abs(np.linalg.norm(q) - 1.0) > tol:
        raise ValueError(f"quaternion is not normalized: |q| = {np.linalg.norm(q)!r}")
    return q


@dataclass
class Pose:
    """Absolute camera pose: position x (world frame) and unit quaternion q.

    q is the camera-from-world rotation, anchored at the camera center:
    p_cam = R(q) (p_world - x).  Construction renormalizes small drift
    and flips sign so u >= 0; a badly non-unit q is rejected rather
    than silently rescaled.
    """

    x: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.x.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got shape {self.x.shape}")
        if self.q.shape != (4,):
            raise ValueError(f"quaternion must be a 4-vector, got shape {self.q.shape}")
        norm = np.linalg.norm(self.q)
        if abs(norm - 1.0) > _NORM_SLACK:
            raise ValueError(f"quaternion is not normalized: |q| = {norm!r}")
        if abs(norm - 1.0) > 1e-12:
            # repair drift, but leave already-unit values bit-untouched so
            # poses survive file roundtrips exactly
            self.q = self.q / norm
        if self.q[0] < 0.0:
            self.q = -self.q


@dataclass
class LogRotation:
    """Axis-scaled arccos rotation vector; |w| <= pi/2 on the canonical sheet."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (3,):
            raise ValueError(f"log rotation must be a 3-vector, got shape {self.w.shape}")


def quat_log(q) -> LogRotation:
    """Log map: w = (v/|v|) * arccos(u); exactly zero for |v| < 1e-12."""
    q = _check_unit(q)
    if q[0] < 0.0:
        raise ValueError("quaternion must be canonicalized (u >= 0) before quat_log")
    v = q[1:]
    vnorm = np.linalg.norm(v)
    if vnorm < _AXIS_EPS:
        return LogRotation(np.zeros(3))
    angle = math.acos(min(q[0], 1.0))
    return LogRotation(v / vnorm * angle)


def quat_exp(w) -> np.ndarray:
    """Exp map: q = [cos|w|, (w/|w|) sin|w|]; identity at w = 0."""
    if isinstance(w, LogRotation):
        w = w.w
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (3,):
        raise ValueError(f"log rotation must be a 3-vector, got shape {w.shape}")
    wnorm = np.linalg.norm(w)
    if wnorm < _AXIS_EPS:
        return np.array([1.0, 0.0, 0.0, 0.0])
    q = np.empty(4)
    q[0] = math.cos(wnorm)
    q[1:] = w / wnorm * math.sin(wnorm)
    return q


def rotation_error_deg(q1, q2) -> float:
    """Geodesic rotation distance in degrees; |dot| handles the double cover.

    Both inputs are canonicalized first, so q vs. -q is the identical
    representation and returns exactly 0 (arccos would otherwise turn a
    1-ulp dot-product rounding into a microdegree).
    """
    q1 = _check_unit(q1)
    q2 = _check_unit(q2)
    if q1[0] < 0.0:
        q1 = -q1
    if q2[0] < 0.0:
        q2 = -q2
    if np.array_equal(q1, q2):
        return 0.0
    dot = min(abs(float(np.dot(q1, q2))), 1.0)
    return math.degrees(2.0 * math.acos(dot))


def translation_error(x1, x2) -> float:
    """Euclidean distance between two translations."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    return float(np.linalg.norm(x1 - x2))


def rotate_vectors(q, pts: np.ndarray) -> np.ndarray:
    """Apply the rotation of q to points of shape (..., 3).

    Uses p' = p + 2 v x (v x p + u p), the expanded quaternion sandwich.
    """
    q = _check_unit(q)
    pts = np.asarray(pts, dtype=np.float64)
    u, v = q[0], q[1:]
    t = np.cross(v, pts) + u * pts
    return pts + 2.0 * np.cross(v, t)


def quat_from_rotation_matrix(r: np.ndarray) -> np.ndarray:
    """Unit quaternion of a proper rotation matrix, canonical sign u >= 0.

    Shepperd's method: branch on the largest of trace and diagonal
    entries so the division is always well conditioned.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {r.shape}")
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > max(r[0, 0], r[1, 1], r[2, 2]):
        s = math.sqrt(1.0 + tr) * 2.0
        q = np.array([
            0.25 * s,
            (r[2, 1] - r[1, 2]) / s,
            (r[0, 2] - r[2, 0]) / s,
            (r[1, 0] - r[0, 1]) / s,
        ])
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([
            (r[2, 1] - r[1, 2]) / s,
            0.25 * s,
            (r[0, 1] + r[1, 0]) / s,
            (r[0, 2] + r[2, 0]) / s,
        ])
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
        q = np.array([
            (r[0, 2] - r[2, 0]) / s,
            (r[0, 1] + r[1, 0]) / s,
            0.25 * s,
            (r[1, 2] + r[2, 1]) / s,
        ])
    else:
        s = math.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
        q = np.array([
            (r[1, 0] - r[0, 1]) / s,
            (r[0, 2] + r[2, 0]) / s,
            (r[1, 2] + r[2, 1]) / s,
            0.25 * s,
        ])
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return q
