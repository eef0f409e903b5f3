"""
Plane and rigid-transform geometry for standard-plane regression.

All positions are world millimetres with the origin at the volume center.
A plane is stored as its center and the unit row (e_u) and column (e_v)
directions; the normal e_w is always derived as e_u x e_v.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, Tuple

import numpy as np

from .errors import GeometryError

Vec3 = np.ndarray
Mat3 = np.ndarray

ORTHO_TOL = 1e-9
PLANE_NAMES = ("axial", "coronal", "sagittal")


class BodyRegion(str, Enum):
    """Anatomical regions; the enum order fixes the one-hot / head index."""

    CALCANEUS = "calcaneus"
    ANKLE = "ankle"
    KNEE = "knee"
    WRIST = "wrist"

    @property
    def index(self) -> int:
        return list(BodyRegion).index(self)

    @classmethod
    def from_index(cls, index: int) -> "BodyRegion":
        regions = list(cls)
        if not 0 <= index < len(regions):
            raise GeometryError(f"Unknown region index {index}")
        return regions[index]


def _frozen(values, shape: Tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} has non-finite entries: {arr}")
    arr.flags.writeable = False
    return arr


def rot_x(deg: float) -> Mat3:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> Mat3:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> Mat3:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(r: Mat3, tol: float = ORTHO_TOL) -> bool:
    """True if r is orthonormal with determinant +1 within tol."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(np.max(np.abs(r.T @ r - np.eye(3))) <= tol and abs(np.linalg.det(r) - 1.0) <= tol)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation; homogeneous form [[R, t], [0, 1]]."""

    rotation: Mat3
    translation: Vec3 = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = _frozen(self.rotation, (3, 3), "rotation")
        translation = _frozen(self.translation, (3,), "translation")
        if not is_rotation(rotation):
            raise GeometryError("RigidTransform rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) with x -> R x + t."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class Plane:
    """One MPR plane: center plus orthonormal row/column directions."""

    center: Vec3
    e_u: Vec3
    e_v: Vec3
    e_w: Vec3 = field(init=False)

    def __post_init__(self):
        center = _frozen(self.center, (3,), "center")
        e_u = _frozen(self.e_u, (3,), "e_u")
        e_v = _frozen(self.e_v, (3,), "e_v")
        if abs(np.linalg.norm(e_u) - 1.0) > ORTHO_TOL or abs(np.linalg.norm(e_v) - 1.0) > ORTHO_TOL:
            raise GeometryError("Plane directions e_u and e_v must be unit length")
        if abs(float(e_u @ e_v)) > ORTHO_TOL:
            raise GeometryError("Plane directions e_u and e_v must be orthogonal")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "e_u", e_u)
        object.__setattr__(self, "e_v", e_v)
        object.__setattr__(self, "e_w", _frozen(np.cross(e_u, e_v), (3,), "e_w"))

    @classmethod
    def from_directions(cls, center, e_u, e_v) -> "Plane":
        """Build a plane from approximately orthonormal directions (Gram-Schmidt on e_v)."""
        e_u = np.asarray(e_u, dtype=np.float64)
        e_v = np.asarray(e_v, dtype=np.float64)
        nu = np.linalg.norm(e_u)
        if nu < 1e-12:
            raise GeometryError("Zero-length e_u")
        e_u = e_u / nu
        e_v = e_v - (e_v @ e_u) * e_u
        nv = np.linalg.norm(e_v)
        if nv < 1e-12:
            raise GeometryError("e_v is parallel to e_u")
        return cls(center, e_u, e_v / nv)

    def transformed(self, rotation: Mat3, translation: Vec3) -> "Plane":
        """Rigidly move the plane: center -> R c + t, directions -> R e."""
        rotation = np.asarray(rotation, dtype=np.float64)
        return Plane(rotation @ self.center + translation, rotation @ self.e_u, rotation @ self.e_v)

    def as_dict(self) -> Dict[str, list]:
        return {"center_mm": self.center.tolist(), "e_u": self.e_u.tolist(), "e_v": self.e_v.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "Plane":
        try:
            return cls(data["center_mm"], data["e_u"], data["e_v"])
        except KeyError as exc:
            raise GeometryError(f"Plane record is missing {exc}") from exc


@dataclass(frozen=True, eq=False)
class PlaneTriplet:
    """Axial, coronal (semi-coronal for the calcaneus) and sagittal planes of one volume."""

    axial: Plane
    coronal: Plane
    sagittal: Plane
    region: BodyRegion

    def __post_init__(self):
        object.__setattr__(self, "region", BodyRegion(self.region))

    def __iter__(self) -> Iterator[Plane]:
        return iter((self.axial, self.coronal, self.sagittal))

    def planes(self) -> Dict[str, Plane]:
        return {"axial": self.axial, "coronal": self.coronal, "sagittal": self.sagittal}

    def replace(self, **planes: Plane) -> "PlaneTriplet":
        merged = {**self.planes(), **planes}
        return PlaneTriplet(region=self.region, **merged)

    def as_dict(self) -> Dict[str, dict]:
        return {name: plane.as_dict() for name, plane in self.planes().items()}

    @classmethod
    def from_dict(cls, data: Dict[str, dict], region) -> "PlaneTriplet":
        return cls(*(Plane.from_dict(data[name]) for name in PLANE_NAMES), region=BodyRegion(region))


@dataclass(frozen=True)
class VolumeMeta:
    """Grid dimensions (voxels) and spacing (mm/voxel); world origin at the volume center."""

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise GeometryError("VolumeMeta needs three dims and three spacings")
        if min(dims) < 2:
            raise GeometryError(f"Volume dims must be >= 2 per axis, got {dims}")
        if min(spacing) <= 0 or not all(np.isfinite(spacing)):
            raise GeometryError(f"Volume spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def extent(self) -> np.ndarray:
        """Physical edge length per axis in mm."""
        return np.asarray(self.dims, dtype=np.float64) * np.asarray(self.spacing)

    @property
    def half_extent(self) -> np.ndarray:
        return self.extent / 2.0


def voxel_to_world(index: np.ndarray, meta: VolumeMeta) -> np.ndarray:
    """index * spacing - extent / 2."""
    return np.asarray(index, dtype=np.float64) * np.asarray(meta.spacing) - meta.half_extent


def world_to_voxel(points: np.ndarray, meta: VolumeMeta) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) + meta.half_extent) / np.asarray(meta.spacing)


def plane_from_transform(t: RigidTransform) -> Plane:
    """Rows of R give e_u, e_v (e_w follows); the translation is the plane center."""
    return Plane(t.translation, t.rotation[0], t.rotation[1])


def transform_from_plane(p: Plane) -> RigidTransform:
    return RigidTransform(np.stack([p.e_u, p.e_v, p.e_w]), p.center)


def normalize_translation(t: Vec3, meta: VolumeMeta, tol: float = 1e-9) -> Vec3:
    """Map a world position into [-1, 1] per axis; the volume center maps to 0."""
    t = np.asarray(t, dtype=np.float64)
    scaled = t / meta.half_extent
    if not np.all(np.isfinite(scaled)) or np.any(np.abs(scaled) > 1.0 + tol):
        raise GeometryError(f"Translation {t} mm lies outside the volume extent {meta.extent} mm")
    return np.clip(scaled, -1.0, 1.0)


def denormalize_translation(t_norm: Vec3, meta: VolumeMeta) -> Vec3:
    return np.asarray(t_norm, dtype=np.float64) * meta.half_extent


def angle_between(a: Vec3, b: Vec3) -> float:
    """Angle in degrees in [0, 180], via atan2(|a x b|, a . b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.linalg.norm(a) == 0.0 or np.linalg.norm(b) == 0.0:
        raise GeometryError("angle_between is undefined for zero vectors")
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))
