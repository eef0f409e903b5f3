"""
Synthetic phantom volumes with exact standard-plane annotations.

Each region is modelled by a rigid composition of soft-edged ellipsoids in an
anatomy frame, plus an off-axis orientation marker that breaks every mirror and
rotation symmetry. A phantom is rendered in HU under its true pose, and the
ground-truth planes are the canonical region planes moved by the same pose.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .augmentation import AIR_HU, Volume
from .errors import DataError, GeometryError
from .geometry import (
    BodyRegion,
    Plane,
    PlaneTriplet,
    RigidTransform,
    VolumeMeta,
    rot_x,
    rot_z,
    voxel_to_world,
)
from .rotation_codecs import euler_to_matrix

logger = logging.getLogger(__name__)

N_FOLDS = 5
SEMI_CORONAL_TILT_DEG = 25.0
STANDARD_FRACTIONS = (1.0, 0.8, 0.6, 0.4)
# Volumes per region in the clinical/cadaver collection the imbalance mimics.
CLINICAL_COUNTS = {
    BodyRegion.CALCANEUS: 160,
    BodyRegion.ANKLE: 220,
    BodyRegion.KNEE: 274,
    BodyRegion.WRIST: 250,
}
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Ellipsoid:
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    hu: float


# Anatomy-frame layouts (mm). The first entry is the soft-tissue envelope, off the anatomy origin on
# all three axes so no rotation about the volume center maps the outline onto itself. The last entry
# of every layout is the orientation marker.
_LAYOUTS: Dict[BodyRegion, Tuple[Ellipsoid, ...]] = {
    BodyRegion.CALCANEUS: (
        Ellipsoid((4.0, 4.0, 4.0), (55.0, 40.0, 35.0), 1040.0),
        Ellipsoid((-10.0, 5.0, -5.0), (35.0, 18.0, 20.0), 800.0),
        Ellipsoid((20.0, -6.0, 18.0), (14.0, 12.0, 10.0), 650.0),
        Ellipsoid((28.0, 22.0, -20.0), (6.0, 6.0, 6.0), 1500.0),
    ),
    BodyRegion.ANKLE: (
        Ellipsoid((-4.0, 4.0, 4.0), (46.0, 38.0, 62.0), 1040.0),
        Ellipsoid((0.0, -4.0, 25.0), (12.0, 12.0, 38.0), 900.0),
        Ellipsoid((15.0, 10.0, 15.0), (6.0, 6.0, 32.0), 750.0),
        Ellipsoid((-8.0, 0.0, -25.0), (22.0, 16.0, 10.0), 800.0),
        Ellipsoid((-26.0, 24.0, 30.0), (8.0, 8.0, 8.0), 1500.0),
    ),
    BodyRegion.KNEE: (
        Ellipsoid((4.0, 4.0, 4.0), (60.0, 46.0, 72.0), 1040.0),
        Ellipsoid((0.0, 0.0, 30.0), (28.0, 24.0, 30.0), 850.0),
        Ellipsoid((0.0, 2.0, -28.0), (32.0, 26.0, 24.0), 850.0),
        Ellipsoid((4.0, -30.0, 4.0), (10.0, 5.0, 12.0), 700.0),
        Ellipsoid((30.0, 26.0, -36.0), (8.0, 8.0, 8.0), 1500.0),
    ),
    BodyRegion.WRIST: (
        Ellipsoid((-4.0, -4.0, 4.0), (50.0, 30.0, 60.0), 1040.0),
        Ellipsoid((-16.0, 0.0, 28.0), (10.0, 10.0, 34.0), 850.0),
        Ellipsoid((14.0, 0.0, 30.0), (7.0, 7.0, 32.0), 800.0),
        Ellipsoid((0.0, 2.0, -18.0), (28.0, 10.0, 12.0), 750.0),
        Ellipsoid((-30.0, -18.0, -34.0), (6.0, 6.0, 6.0), 1500.0),
    ),
}

# Canonical plane centers in the anatomy frame (mm).
_PLANE_CENTERS: Dict[BodyRegion, Tuple[Tuple[float, float, float], ...]] = {
    BodyRegion.CALCANEUS: ((0.0, 0.0, 5.0), (12.0, 0.0, 0.0), (0.0, -4.0, 0.0)),
    BodyRegion.ANKLE: ((0.0, 0.0, -10.0), (0.0, 2.0, 0.0), (-3.0, 0.0, 0.0)),
    BodyRegion.KNEE: ((0.0, 0.0, 2.0), (0.0, -5.0, 0.0), (0.0, 0.0, 0.0)),
    BodyRegion.WRIST: ((0.0, 0.0, -12.0), (0.0, 0.0, 0.0), (-14.0, 0.0, 0.0)),
}


def canonical_planes(region: BodyRegion) -> PlaneTriplet:
    """Region planes in the anatomy frame; the calcaneus coronal slot is the semi-coronal plane."""
    region = BodyRegion(region)
    axial_c, coronal_c, sagittal_c = _PLANE_CENTERS[region]
    coronal_e_v = np.array([0.0, 0.0, 1.0])
    if region is BodyRegion.CALCANEUS:
        coronal_e_v = rot_x(SEMI_CORONAL_TILT_DEG) @ coronal_e_v
    return PlaneTriplet(
        axial=Plane(axial_c, (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
        coronal=Plane(coronal_c, (1.0, 0.0, 0.0), coronal_e_v),
        sagittal=Plane(sagittal_c, (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
        region=region,
    )


@dataclass(frozen=True, eq=False)
class PhantomSpec:
    region: BodyRegion
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (5.0, 5.0, 5.0)
    shape_seed: int = 0
    edge_softness: float = 8.0

    def __post_init__(self):
        object.__setattr__(self, "region", BodyRegion(self.region))

    @property
    def oblique_coronal(self) -> bool:
        return self.region is BodyRegion.CALCANEUS

    @property
    def meta(self) -> VolumeMeta:
        return VolumeMeta(self.dims, self.spacing)


def _jittered_layout(region: BodyRegion, shape_seed: int) -> List[Ellipsoid]:
    """Patient-specific variation: radii +-10 %, centers +-3 mm (marker kept fixed)."""
    rng = np.random.default_rng([region.index, shape_seed])
    layout = list(_LAYOUTS[region])
    jittered = []
    for part in layout[:-1]:
        radii = np.asarray(part.radii) * rng.uniform(0.9, 1.1, size=3)
        center = np.asarray(part.center) + rng.uniform(-3.0, 3.0, size=3)
        jittered.append(Ellipsoid(tuple(center), tuple(radii), part.hu))
    jittered.append(layout[-1])
    return jittered


def generate_phantom(spec: PhantomSpec) -> Tuple[Volume, PlaneTriplet]:
    meta = spec.meta
    grid = np.stack(np.meshgrid(*(np.arange(n) for n in meta.dims), indexing="ij"), axis=-1)
    world = voxel_to_world(grid.reshape(-1, 3), meta)
    local = (world - spec.pose.translation) @ spec.pose.rotation
    hu = np.full(local.shape[0], AIR_HU)
    for part in _jittered_layout(spec.region, spec.shape_seed):
        q = (local - np.asarray(part.center)) / np.asarray(part.radii)
        r = np.linalg.norm(q, axis=1)
        hu += part.hu / (1.0 + np.exp(np.clip(spec.edge_softness * (r - 1.0), -60.0, 60.0)))
    return Volume(meta, hu.reshape(meta.dims).astype(np.float32)), phantom_planes(spec)


def sample_pose(rng: np.random.Generator, hard: bool = False, max_rot_deg: float = 45.0,
                max_trans_mm: float = 15.0) -> RigidTransform:
    """Euler angles uniform in [-max, max]; hard poses add a 90-180 deg turn about z."""
    angles = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg, size=3))
    rotation = euler_to_matrix(*angles)
    if hard:
        turn = rng.uniform(90.0, 180.0) * rng.choice([-1.0, 1.0])
        rotation = rot_z(turn) @ rotation
    return RigidTransform(rotation, rng.uniform(-max_trans_mm, max_trans_mm, size=3))


@dataclass(frozen=True, eq=False)
class ManifestEntry:
    volume: str
    region: BodyRegion
    patient_id: str
    fold: int
    planes: PlaneTriplet

    @property
    def entry_id(self) -> str:
        return Path(self.volume).stem

    def as_dict(self) -> dict:
        return {
            "volume": self.volume,
            "region": self.region.value,
            "patient_id": self.patient_id,
            "fold": self.fold,
            "planes": self.planes.as_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ManifestEntry":
        region = BodyRegion(data["region"])
        return cls(
            volume=data["volume"],
            region=region,
            patient_id=data["patient_id"],
            fold=int(data["fold"]),
            planes=PlaneTriplet.from_dict(data["planes"], region),
        )


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...]
    n_folds: int = N_FOLDS
    seed: int = 0
    root: str = "."

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        for entry in self.entries:
            if not 0 <= entry.fold < self.n_folds:
                raise DataError(f"Entry {entry.volume} has fold {entry.fold} outside 0..{self.n_folds - 1}")
        folds_by_patient: Dict[str, set] = defaultdict(set)
        for entry in self.entries:
            folds_by_patient[entry.patient_id].add(entry.fold)
        split = [pid for pid, folds in folds_by_patient.items() if len(folds) > 1]
        if split:
            raise DataError(f"Patients split across folds: {split[:5]}")

    def in_folds(self, folds: Sequence[int]) -> List[ManifestEntry]:
        wanted = set(folds)
        return [e for e in self.entries if e.fold in wanted]

    def volume_path(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.volume

    def as_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "entries": [e.as_dict() for e in self.entries],
        }


def fold_roles(test_fold: int, n_folds: int = N_FOLDS) -> Dict[str, List[int]]:
    """Fold i tests, fold i+1 validates, the rest trains."""
    if not 0 <= test_fold < n_folds:
        raise DataError(f"Fold {test_fold} outside 0..{n_folds - 1}")
    val = (test_fold + 1) % n_folds
    return {
        "test": [test_fold],
        "validation": [val],
        "train": [f for f in range(n_folds) if f not in (test_fold, val)],
    }


def region_counts(n_per_region: int, imbalanced: bool = False) -> Dict[BodyRegion, int]:
    """Equal counts, or the clinical region proportions scaled so the largest region has n_per_region."""
    if not imbalanced:
        return {region: n_per_region for region in BodyRegion}
    largest = max(CLINICAL_COUNTS.values())
    return {r: max(N_FOLDS, int(round(n_per_region * c / largest))) for r, c in CLINICAL_COUNTS.items()}


def _balanced_fold_sizes(n: int, rng: np.random.Generator) -> List[int]:
    sizes = [n // N_FOLDS] * N_FOLDS
    for fold in rng.permutation(N_FOLDS)[: n % N_FOLDS]:
        sizes[fold] += 1
    return sizes


def build_manifest(
    n_per_region: Union[int, Mapping[BodyRegion, int]],
    seed: int = 0,
    hard_fraction: float = 0.1,
    pair_fraction: float = 0.3,
) -> Tuple[DatasetManifest, List[PhantomSpec]]:
    """Plan a dataset: per-region fold sizes, patients (1 or 2 scans) and poses.

    Patients are formed inside a fold, so co-location and region balance hold by
    construction. Returns the manifest (with ground truth) and the phantom specs
    in entry order; volumes are rendered by generate_dataset.
    """
    counts = n_per_region if isinstance(n_per_region, Mapping) else {r: n_per_region for r in BodyRegion}
    if min(counts.values()) < N_FOLDS:
        raise DataError(f"Need at least {N_FOLDS} volumes per region, got {dict(counts)}")
    rng = np.random.default_rng(seed)
    entries: List[ManifestEntry] = []
    specs: List[PhantomSpec] = []
    for region in BodyRegion:
        n = counts[region]
        patient = 0
        for fold, size in enumerate(_balanced_fold_sizes(n, rng)):
            left = size
            while left > 0:
                scans = 2 if left >= 2 and rng.random() < pair_fraction else 1
                patient_id = f"{region.value}-p{patient:04d}"
                shape_seed = int(rng.integers(0, 2**31))
                for scan in range(scans):
                    pose = sample_pose(rng, hard=bool(rng.random() < hard_fraction))
                    spec = PhantomSpec(region=region, pose=pose, shape_seed=shape_seed)
                    planes = phantom_planes(spec)
                    name = f"volumes/{region.value}_{len(specs):05d}.f32"
                    entries.append(ManifestEntry(name, region, patient_id, fold, planes))
                    specs.append(spec)
                left -= scans
                patient += 1
    return DatasetManifest(tuple(entries), seed=seed), specs


def phantom_planes(spec: PhantomSpec) -> PlaneTriplet:
    """Ground truth without rendering: canonical planes moved by the pose."""
    planes = canonical_planes(spec.region)
    moved = [p.transformed(spec.pose.rotation, spec.pose.translation) for p in planes]
    return PlaneTriplet(*moved, region=spec.region)


def reduce_training_set(
    m: DatasetManifest,
    fraction: float,
    test_fold: int = 0,
    seed: int = 0,
) -> DatasetManifest:
    """Keep `fraction` of the training volumes (whole patients); test and validation folds untouched."""
    if fraction not in STANDARD_FRACTIONS:
        logger.warning("Training fraction %.3f is not one of the studied levels %s", fraction, STANDARD_FRACTIONS)
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"Training fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return m
    roles = fold_roles(test_fold, m.n_folds)
    train_entries = m.in_folds(roles["train"])
    by_patient: Dict[str, List[ManifestEntry]] = defaultdict(list)
    for entry in train_entries:
        by_patient[entry.patient_id].append(entry)
    target = int(round(fraction * len(train_entries)))
    rng = np.random.default_rng(seed)
    kept_patients = set()
    kept = 0
    for pid in rng.permutation(sorted(by_patient)):
        if kept >= target:
            break
        kept_patients.add(pid)
        kept += len(by_patient[pid])
    train_set = set(roles["train"])
    entries = tuple(e for e in m.entries if e.fold not in train_set or e.patient_id in kept_patients)
    if not any(e.fold in train_set for e in entries):
        raise DataError(f"Reducing to {fraction:.0%} leaves no training volumes")
    logger.info("Training set reduced to %d of %d volumes", kept, len(train_entries))
    return DatasetManifest(entries, n_folds=m.n_folds, seed=m.seed, root=m.root)


def save_volume(volume: Volume, path: Union[str, Path], region: BodyRegion) -> None:
    """Raw little-endian float32 voxels in C order of the [x, y, z] grid plus a .hdr sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(volume.voxels, dtype="<f4").tofile(path)
    header = (
        f"dims={' '.join(str(d) for d in volume.meta.dims)}\n"
        f"spacing_mm={' '.join(repr(float(s)) for s in volume.meta.spacing)}\n"
        f"region={BodyRegion(region).value}\n"
    )
    path.with_suffix(".hdr").write_text(header)


def load_volume(path: Union[str, Path]) -> Tuple[Volume, BodyRegion]:
    path = Path(path)
    header_path = path.with_suffix(".hdr")
    try:
        fields_ = dict(
            line.split("=", 1) for line in header_path.read_text().splitlines() if line.strip()
        )
        dims = tuple(int(v) for v in fields_["dims"].split())
        spacing = tuple(float(v) for v in fields_["spacing_mm"].split())
        region = BodyRegion(fields_["region"].strip())
        data = np.fromfile(path, dtype="<f4")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"Cannot read volume {path}: {exc}") from exc
    if data.size != int(np.prod(dims)):
        raise DataError(f"Volume {path} holds {data.size} voxels, header says {dims}")
    return Volume(VolumeMeta(dims, spacing), data.reshape(dims).astype(np.float32)), region


def save_manifest(m: DatasetManifest, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(m.as_dict(), indent=2))


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
        entries = tuple(ManifestEntry.from_dict(e) for e in raw["entries"])
        return DatasetManifest(entries, n_folds=int(raw.get("n_folds", N_FOLDS)),
                               seed=int(raw.get("seed", 0)), root=str(path.parent))
    except (OSError, KeyError, ValueError, TypeError, GeometryError) as exc:
        raise DataError(f"Cannot read manifest {path}: {exc}") from exc


def generate_dataset(
    out_dir: Union[str, Path],
    n_per_region: int,
    seed: int = 0,
    hard_fraction: float = 0.1,
    pair_fraction: float = 0.3,
    imbalanced: bool = False,
    dims: int = 32,
    spacing_mm: float = 5.0,
    workers: int = 1,
) -> DatasetManifest:
    """Render every planned phantom and write volumes plus manifest.json under out_dir."""
    out_dir = Path(out_dir)
    manifest, specs = build_manifest(region_counts(n_per_region, imbalanced), seed, hard_fraction, pair_fraction)
    specs = [
        PhantomSpec(s.region, s.pose, (dims, dims, dims), (spacing_mm,) * 3, s.shape_seed) for s in specs
    ]

    def render(item: Tuple[ManifestEntry, PhantomSpec]) -> str:
        entry, spec = item
        volume, _ = generate_phantom(spec)
        save_volume(volume, out_dir / entry.volume, entry.region)
        return entry.volume

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for _ in pool.map(render, zip(manifest.entries, specs)):
            pass
    manifest = DatasetManifest(manifest.entries, seed=seed, root=str(out_dir))
    save_manifest(manifest, out_dir / "manifest.json")
    per_region = Counter(e.region.value for e in manifest.entries)
    logger.info("Wrote %d phantoms to %s (%s)", len(manifest.entries), out_dir, dict(per_region))
    return manifest
