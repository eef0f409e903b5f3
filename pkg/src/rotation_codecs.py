"""
Rotation representations regressed by the network and their decoders.

Four encodings are supported, each keyed by the name used on the command line:

  euler  sin/cos of the intrinsic Z-Y-X Euler angles (6 values)
  quat   unit quaternion (w, x, y, z) with w >= 0 (4 values)
  6dxy   raw first and second matrix columns (6 values)
  6dxz   raw first and third matrix columns (6 values)

Decoders accept unconstrained network output and always return an exactly
orthonormal matrix with determinant +1.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateRotationError, GeometryError
from .geometry import Mat3, is_rotation

# Changing the Euler order changes the meaning of stored targets and checkpoints.
EULER_ORDER = "ZYX"
_GIMBAL_EPS = 1e-12
_DEGENERATE_EPS = 1e-10


class RepresentationKind(str, Enum):
    EULER = "euler"
    QUAT = "quat"
    SIX_D_XY = "6dxy"
    SIX_D_XZ = "6dxz"


def encoding_size(kind: RepresentationKind) -> int:
    return 4 if RepresentationKind(kind) is RepresentationKind.QUAT else 6


@dataclass(frozen=True, eq=False)
class RotationEncoding:
    """Tagged raw vector of one representation."""

    kind: RepresentationKind
    values: np.ndarray

    def __post_init__(self):
        kind = RepresentationKind(self.kind)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size != encoding_size(kind):
            raise GeometryError(f"{kind.value} encoding needs {encoding_size(kind)} values, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise GeometryError(f"{kind.value} encoding has non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", values)


def euler_to_matrix(alpha: float, beta: float, gamma: float) -> Mat3:
    """R = Rz(alpha) Ry(beta) Rx(gamma), angles in radians."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    return np.array([
        [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
        [sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg],
        [-sb, cb * sg, cb * cg],
    ])


def matrix_to_euler(r: Mat3) -> np.ndarray:
    """Inverse of euler_to_matrix; at gimbal lock gamma is fixed to 0."""
    cb = np.hypot(r[0, 0], r[1, 0])
    beta = np.arctan2(-r[2, 0], cb)
    if cb > _GIMBAL_EPS:
        alpha = np.arctan2(r[1, 0], r[0, 0])
        gamma = np.arctan2(r[2, 1], r[2, 2])
    else:
        alpha = np.arctan2(-r[0, 1], r[1, 1])
        gamma = 0.0
    return np.array([alpha, beta, gamma])


def matrix_to_quaternion(r: Mat3) -> np.ndarray:
    """Shepperd's method; result normalised with w >= 0."""
    tr = np.trace(r)
    candidates = np.array([tr, r[0, 0], r[1, 1], r[2, 2]])
    k = int(np.argmax(candidates))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quaternion_to_matrix(q: np.ndarray) -> Mat3:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < _DEGENERATE_EPS:
        raise DegenerateRotationError("Cannot decode a zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < _DEGENERATE_EPS:
        raise DegenerateRotationError(f"Degenerate 6D input: {what} has zero length")
    return v / n


def _cross_unit(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    c = np.cross(a, b)
    n = np.linalg.norm(c)
    if n < _DEGENERATE_EPS * max(np.linalg.norm(a) * np.linalg.norm(b), 1.0):
        raise DegenerateRotationError("Degenerate 6D input: the two vectors are parallel")
    return c / n


def encode(r: Mat3, kind: RepresentationKind) -> RotationEncoding:
    kind = RepresentationKind(kind)
    r = np.asarray(r, dtype=np.float64)
    if not is_rotation(r):
        raise GeometryError("encode expects an orthonormal matrix with det +1")
    if kind is RepresentationKind.EULER:
        angles = matrix_to_euler(r)
        values = np.column_stack([np.sin(angles), np.cos(angles)]).reshape(-1)
    elif kind is RepresentationKind.QUAT:
        values = matrix_to_quaternion(r)
    elif kind is RepresentationKind.SIX_D_XY:
        values = np.concatenate([r[:, 0], r[:, 1]])
    else:
        values = np.concatenate([r[:, 0], r[:, 2]])
    return RotationEncoding(kind, np.clip(values, -1.0, 1.0))


def decode(e: RotationEncoding) -> Mat3:
    v = e.values
    if e.kind is RepresentationKind.EULER:
        sc = v.reshape(3, 2)
        alpha, beta, gamma = np.arctan2(sc[:, 0], sc[:, 1])
        return euler_to_matrix(alpha, beta, gamma)
    if e.kind is RepresentationKind.QUAT:
        return quaternion_to_matrix(v)
    col_x = _unit(v[:3], "x column")
    if e.kind is RepresentationKind.SIX_D_XY:
        col_z = _cross_unit(col_x, v[3:])
        col_y = np.cross(col_z, col_x)
    else:
        col_y = _cross_unit(v[3:], col_x)
        col_z = np.cross(col_x, col_y)
    return np.column_stack([col_x, col_y, col_z])


def geodesic_distance(a: Mat3, b: Mat3) -> float:
    """Rotation angle of a^T b in radians, in [0, pi]."""
    m = np.asarray(a, dtype=np.float64).T @ np.asarray(b, dtype=np.float64)
    cos_theta = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    sin_theta = np.linalg.norm(skew) / 2.0
    return float(np.arctan2(sin_theta, cos_theta))
