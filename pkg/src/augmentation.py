"""
Online augmentation and intensity normalization of CBCT volumes.

Spatial augmentations are composed into one homogeneous matrix
(T_m = M_mirror . T_r . T_s . T_t . T_R) so a training sample is interpolated
exactly once. Matrices act on world points in mm (column-vector convention):
a point x of the input volume appears at T_m x in the augmented volume.
Voxel arrays are indexed [x, y, z].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

from .config import AugmentConfig, IntensityConfig
from .errors import GeometryError
from .geometry import Mat3, Plane, PlaneTriplet, VolumeMeta, voxel_to_world, world_to_voxel
from .rotation_codecs import euler_to_matrix

logger = logging.getLogger(__name__)

AIR_HU = -1000.0
MIRROR_X = np.diag([-1.0, 1.0, 1.0, 1.0])

Seed = Union[int, np.random.Generator]


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense scalar grid: HU before normalization, [0, 1] after."""

    meta: VolumeMeta
    voxels: np.ndarray

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.shape != self.meta.dims:
            raise GeometryError(f"Voxel grid {voxels.shape} does not match dims {self.meta.dims}")
        if not np.all(np.isfinite(voxels)):
            raise GeometryError("Volume contains non-finite voxels")
        object.__setattr__(self, "voxels", voxels)


@dataclass(frozen=True, eq=False)
class SpatialAugmentParams:
    rotation: Mat3 = field(default_factory=lambda: np.eye(3))
    euler_deg: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    mirror_x: bool = False
    subsample_factor: float = 1.0
    rotate: bool = False
    rescale: bool = False
    translate: bool = False
    subsample: bool = False


@dataclass(frozen=True)
class IntensityParams:
    f: float = 1.0
    min_hu: float = -490.0
    max_hu: float = 1040.0
    y: float = 0.02

    def __post_init__(self):
        if not self.min_hu < self.max_hu:
            raise GeometryError(f"Intensity window needs min_hu < max_hu, got {self.min_hu}, {self.max_hu}")
        if not 0.0 < self.y < 0.5:
            raise GeometryError(f"Window level y must lie in (0, 0.5), got {self.y}")

    @property
    def g(self) -> float:
        return gain(self.y)


def inference_intensity(cfg: IntensityConfig = IntensityConfig()) -> IntensityParams:
    """The configured window without the random factor f."""
    return IntensityParams(1.0, cfg.min_hu, cfg.max_hu, cfg.y)


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_params(
    rng_seed: Seed,
    aug: AugmentConfig = AugmentConfig(),
    intensity: IntensityConfig = IntensityConfig(),
) -> Tuple[SpatialAugmentParams, IntensityParams]:
    """Draw one augmentation; every value is drawn even when its flag is off."""
    rng = _rng(rng_seed)
    flags = rng.random(4)
    euler = rng.uniform(-aug.rot_deg, aug.rot_deg, size=3)
    scale = rng.uniform(*aug.scale)
    translation = rng.uniform(-aug.trans_mm, aug.trans_mm, size=3)
    f = rng.uniform(*intensity.f)
    spatial = SpatialAugmentParams(
        rotation=euler_to_matrix(*np.deg2rad(euler)),
        euler_deg=tuple(float(a) for a in euler),
        scale=float(scale),
        translation=tuple(float(t) for t in translation),
        mirror_x=bool(flags[3] < aug.mirror_p),
        rotate=bool(flags[0] < aug.p),
        rescale=bool(flags[1] < aug.p),
        translate=bool(flags[2] < aug.p),
    )
    return spatial, IntensityParams(f=float(f), min_hu=intensity.min_hu, max_hu=intensity.max_hu, y=intensity.y)


def factor_matrices(p: SpatialAugmentParams) -> dict:
    """Individual homogeneous factors; disabled operations are the identity."""
    t_r = np.eye(4)
    if p.subsample:
        t_r[:3, :3] *= p.subsample_factor
    t_s = np.eye(4)
    if p.rescale:
        t_s[:3, :3] *= p.scale
    t_t = np.eye(4)
    if p.translate:
        t_t[:3, 3] = p.translation
    t_rot = np.eye(4)
    if p.rotate:
        t_rot[:3, :3] = p.rotation
    mirror = MIRROR_X.copy() if p.mirror_x else np.eye(4)
    return {"mirror": mirror, "subsample": t_r, "scale": t_s, "translate": t_t, "rotate": t_rot}


def compose_transform(p: SpatialAugmentParams) -> np.ndarray:
    f = factor_matrices(p)
    return f["mirror"] @ f["subsample"] @ f["scale"] @ f["translate"] @ f["rotate"]


def resample(
    v: Volume,
    t: np.ndarray,
    out_dims: Tuple[int, int, int] = None,
    out_spacing: Tuple[float, float, float] = None,
) -> Volume:
    """Trilinear resampling of v under t in a single pass; outside samples are air.

    The output grid covers the input field of view unless out_spacing is given.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (4, 4) or abs(np.linalg.det(t[:3, :3])) < 1e-12:
        raise GeometryError("resample needs an invertible 4x4 homogeneous matrix")
    out_dims = tuple(out_dims or v.meta.dims)
    if out_spacing is None:
        out_spacing = tuple(v.meta.extent / np.asarray(out_dims))
    out_meta = VolumeMeta(out_dims, out_spacing)
    if out_meta == v.meta and np.array_equal(t, np.eye(4)):
        return Volume(out_meta, v.voxels.copy())

    grid = np.stack(np.meshgrid(*(np.arange(n) for n in out_dims), indexing="ij"), axis=-1)
    world_out = voxel_to_world(grid.reshape(-1, 3), out_meta)
    inv = np.linalg.inv(t)
    world_in = world_out @ inv[:3, :3].T + inv[:3, 3]
    coords = world_to_voxel(world_in, v.meta).T
    values = ndimage.map_coordinates(
        np.asarray(v.voxels, dtype=np.float64), coords, order=1, mode="constant", cval=AIR_HU
    )
    return Volume(out_meta, values.reshape(out_dims).astype(v.voxels.dtype))


def _similarity_parts(t: np.ndarray, tol: float = 1e-9) -> Tuple[np.ndarray, bool]:
    """Split t's linear block into (rotation, mirrored); reject anything but rigid+scale+mirror."""
    a = t[:3, :3]
    det = np.linalg.det(a)
    if abs(det) < 1e-12 or not np.allclose(t[3], [0.0, 0.0, 0.0, 1.0]):
        raise GeometryError("Annotation transform must be an invertible homogeneous matrix")
    s = abs(det) ** (1.0 / 3.0)
    q = a / s
    if np.max(np.abs(q.T @ q - np.eye(3))) > tol:
        raise GeometryError("Annotation transform must be rigid with isotropic scale and mirroring only")
    return q, det < 0


def _map_plane(plane: Plane, t: np.ndarray, q: np.ndarray, mirrored: bool) -> Plane:
    center = t[:3, :3] @ plane.center + t[:3, 3]
    e_u = q @ plane.e_u
    e_v = q @ plane.e_v
    if mirrored:
        e_v = -e_v
    return Plane.from_directions(center, e_u, e_v)


def transform_annotation(planes: PlaneTriplet, t: np.ndarray) -> PlaneTriplet:
    """Move ground-truth planes along with an augmented volume.

    After a mirror e_v is negated so that e_w = e_u x e_v stays the mapped normal.
    """
    t = np.asarray(t, dtype=np.float64)
    q, mirrored = _similarity_parts(t)
    return PlaneTriplet(*(_map_plane(p, t, q, mirrored) for p in planes), region=planes.region)


def clip_rescale(x_hu, ip: IntensityParams):
    """Shift by 1000 HU, scale by f, clip to the window and rescale to [0, 1].

    The window bounds are shifted the same way, so f = 1 maps min_hu to 0 and max_hu to 1.
    """
    lo = ip.min_hu + 1000.0
    hi = ip.max_hu + 1000.0
    scaled = ip.f * (np.asarray(x_hu, dtype=np.float64) + 1000.0)
    out = (np.clip(scaled, lo, hi) - lo) / (hi - lo)
    return float(out) if np.ndim(out) == 0 else out


def gain(y: float) -> float:
    return float(np.log((1.0 - y) / y) / 0.4)


def window(x, g: float):
    out = 1.0 / (1.0 + np.exp(g * (0.5 - np.asarray(x, dtype=np.float64))))
    return float(out) if np.ndim(out) == 0 else out


def normalize_intensity(voxels: np.ndarray, ip: IntensityParams) -> np.ndarray:
    return window(clip_rescale(voxels, ip), ip.g)


def sample_plane(
    volume: Volume, plane: Plane, size: Tuple[int, int] = (32, 32), pixel_mm: float = None
) -> np.ndarray:
    """MPR slice through `plane`: image[i, j] sits at center + (i - n/2) px e_u + (j - m/2) px e_v."""
    if pixel_mm is None:
        pixel_mm = float(min(volume.meta.spacing))
    iu = (np.arange(size[0]) - size[0] / 2.0) * pixel_mm
    iv = (np.arange(size[1]) - size[1] / 2.0) * pixel_mm
    uu, vv = np.meshgrid(iu, iv, indexing="ij")
    points = plane.center + uu[..., None] * plane.e_u + vv[..., None] * plane.e_v
    coords = world_to_voxel(points.reshape(-1, 3), volume.meta).T
    values = ndimage.map_coordinates(
        np.asarray(volume.voxels, dtype=np.float64), coords, order=1, mode="constant", cval=AIR_HU
    )
    return values.reshape(size)


def augment_sample(
    volume: Volume,
    planes: PlaneTriplet,
    spatial: SpatialAugmentParams,
    intensity: IntensityParams,
    out_dims: Tuple[int, int, int],
) -> Tuple[np.ndarray, PlaneTriplet, VolumeMeta]:
    """One interpolation, annotation update, then intensity normalization.

    Returns the normalized float32 grid, the moved planes and the output grid meta.
    """
    t = compose_transform(spatial)
    moved = resample(volume, t, out_dims)
    return (
        normalize_intensity(moved.voxels, intensity).astype(np.float32),
        transform_annotation(planes, t),
        moved.meta,
    )
