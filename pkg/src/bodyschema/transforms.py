"""Rigid-body transforms backed by unit quaternions.

Quaternions are stored as ``[w, x, y, z]``. A transform maps a point expressed
in its child frame into the parent frame: ``p_parent = R @ p_child + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import math

import numpy as np


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-300:
        raise ValueError(f"cannot normalize quaternion {q!r}")
    q = q / n
    # canonical sign so that q and -q compare equal
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis_angle) -> np.ndarray:
    v = np.asarray(axis_angle, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-15:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return quat_normalize(np.concatenate([[np.cos(half)], np.sin(half) * v / angle]))


def quat_to_axis_angle(q) -> np.ndarray:
    q = quat_normalize(q)
    s = np.linalg.norm(q[1:])
    if s < 1e-15:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(s, q[0])
    return q[1:] / s * angle


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    x, y, z = axis
    angle = float(angle)
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", t)
        self.rotation.flags.writeable = False
        self.translation.flags.writeable = False

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_translation(cls, x, y=None, z=None) -> RigidTransform:
        t = np.asarray(x, dtype=float) if y is None else np.array([x, y, z], dtype=float)
        return cls(translation=t)

    @classmethod
    def from_axis_angle(cls, axis_angle, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(quat_from_axis_angle(axis_angle), np.asarray(translation, dtype=float))

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        R = np.asarray(R, dtype=float)
        # Shepperd's method, picking the largest diagonal term for stability
        tr = np.trace(R)
        cands = [tr, R[0, 0], R[1, 1], R[2, 2]]
        i = int(np.argmax(cands))
        if i == 0:
            w = 0.5 * np.sqrt(1.0 + tr)
            q = [w, (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w),
                 (R[1, 0] - R[0, 1]) / (4 * w)]
        elif i == 1:
            x = 0.5 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = [(R[2, 1] - R[1, 2]) / (4 * x), x, (R[0, 1] + R[1, 0]) / (4 * x),
                 (R[0, 2] + R[2, 0]) / (4 * x)]
        elif i == 2:
            y = 0.5 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
            q = [(R[0, 2] - R[2, 0]) / (4 * y), (R[0, 1] + R[1, 0]) / (4 * y), y,
                 (R[1, 2] + R[2, 1]) / (4 * y)]
        else:
            z = 0.5 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
            q = [(R[1, 0] - R[0, 1]) / (4 * z), (R[0, 2] + R[2, 0]) / (4 * z),
                 (R[1, 2] + R[2, 1]) / (4 * z), z]
        return cls(np.array(q), np.asarray(t, dtype=float))

    @cached_property
    def rotation_matrix(self) -> np.ndarray:
        R = quat_to_matrix(self.rotation)
        R.flags.writeable = False
        return R

    @property
    def axis_angle(self) -> np.ndarray:
        return quat_to_axis_angle(self.rotation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """Map point(s) of shape (3,) or (N, 3) from the child into the parent frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation_matrix.T + self.translation

    def inverse(self) -> RigidTransform:
        qi = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(qi, -(quat_to_matrix(qi) @ self.translation))

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    t = a.rotation_matrix @ b.translation + a.translation
    return RigidTransform(q, t)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()
