"""Six-parameter rigid pose used by projection and registration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = ["RigidTransform6", "rotation_matrix", "canonical_angle"]


def canonical_angle(deg):
    """Wrap an angle in degrees into (-180, 180]."""
    a = math.fmod(float(deg), 360.0)
    if a > 180.0:
        a -= 360.0
    elif a <= -180.0:
        a += 360.0
    return a


def rotation_matrix(rx, ry, rz):
    """Extrinsic X-then-Y-then-Z rotation, ``Rz @ Ry @ Rx``; angles in degrees."""
    ax, ay, az = np.radians([rx, ry, rz])
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    rot_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rot_z = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rot_z @ rot_y @ rot_x


@dataclass(frozen=True)
class RigidTransform6:
    """Rotations (degrees) about the volume centre followed by a translation (mm).

    A volume point ``p`` is moved to ``R @ (p - c) + c + t`` where ``c`` is
    the rotation centre supplied by the caller.
    """

    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        for name in ("rx", "ry", "rz", "tx", "ty", "tz"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise DataError(f"pose component {name} is not finite")
            if name.startswith("r"):
                v = canonical_angle(v)
            object.__setattr__(self, name, v)

    @classmethod
    def from_array(cls, values):
        values = [float(v) for v in values]
        if len(values) != 6:
            raise DataError(f"a pose has 6 parameters, got {len(values)}")
        return cls(*values)

    def as_array(self):
        return np.array([self.rx, self.ry, self.rz, self.tx, self.ty, self.tz])

    @property
    def rotation(self):
        return rotation_matrix(self.rx, self.ry, self.rz)

    @property
    def translation(self):
        return np.array([self.tx, self.ty, self.tz])

    def apply(self, points, center):
        """Move volume-frame points (N, 3) into the world frame."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c = np.asarray(center, dtype=np.float64)
        return (points - c) @ self.rotation.T + c + self.translation

    def compose_offset(self, other):
        """Parameter-wise sum of two poses (used for small pose offsets)."""
        return RigidTransform6.from_array(self.as_array() + other.as_array())
