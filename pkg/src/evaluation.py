"""
Plane coupling post-processing, the weighted plane error score and fold
aggregation of per-volume results.

Per plane j the errors are
  d_j    |(c_pred - c_true) . e_w,true| in mm
  eps_n  angle between the predicted and true normals (deg)
  eps_i  mean angle between the true e_u / e_v and the predicted ones
         projected onto the true plane (deg)
and a volume scores p = mean_j(0.2 d_j + 0.6 eps_n,j + 0.2 eps_i,j).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .augmentation import IntensityParams
from .errors import DataError, GeometryError
from .geometry import PLANE_NAMES, BodyRegion, Plane, PlaneTriplet, angle_between
from .phantom_data import DatasetManifest, load_volume
from .regression_model import ModelState, infer_planes

logger = logging.getLogger(__name__)

WEIGHTS = {"d": 0.2, "eps_n": 0.6, "eps_i": 0.2}
METRICS = ("d", "eps_n", "eps_i", "score")
STAGES = ("regressed", "postproc")
# Normals closer than this are treated as parallel when coupling.
PARALLEL_TOL_DEG = 1.0
_PROJ_EPS = 1e-9


@dataclass(frozen=True)
class CouplingRule:
    """Which plane pairs the post-processing makes orthogonal."""

    orthogonal_pairs: Tuple[Tuple[str, str], ...]

    @property
    def all_orthogonal(self) -> bool:
        return ("axial", "coronal") in self.orthogonal_pairs


_ALL_ORTHOGONAL = CouplingRule((("axial", "coronal"), ("axial", "sagittal"), ("coronal", "sagittal")))
REGION_RULES: Dict[BodyRegion, CouplingRule] = {
    BodyRegion.CALCANEUS: CouplingRule((("axial", "sagittal"),)),
    BodyRegion.ANKLE: _ALL_ORTHOGONAL,
    BodyRegion.KNEE: _ALL_ORTHOGONAL,
    BodyRegion.WRIST: _ALL_ORTHOGONAL,
}


def _unit_or_none(v: np.ndarray, min_norm: float) -> Optional[np.ndarray]:
    n = np.linalg.norm(v)
    return None if n < min_norm else v / n


def _reject(v: np.ndarray, axis: np.ndarray) -> np.ndarray:
    return v - (v @ axis) * axis


def _align_in_plane(plane: Plane, normal: np.ndarray, reference_normal: np.ndarray) -> Optional[Plane]:
    """Plane with the given normal whose e_u runs along its intersection with the reference plane."""
    line = _unit_or_none(np.cross(reference_normal, normal), np.sin(np.deg2rad(PARALLEL_TOL_DEG)))
    if line is None:
        return None
    e_u = line if line @ plane.e_u >= 0 else -line
    return Plane(plane.center, e_u, np.cross(normal, e_u))


def couple_planes(pred: PlaneTriplet, rules: Optional[Mapping[BodyRegion, CouplingRule]] = None) -> PlaneTriplet:
    """Enforce the expected angular relations between the regressed planes.

    The axial plane is the reference and stays untouched. Where the rule asks
    for it, the coronal normal is made orthogonal to the axial normal and the
    sagittal normal becomes their cross product; for the calcaneus only the
    sagittal normal is made orthogonal to the axial one. Coronal and sagittal
    are then rotated in-plane so that e_u lies on their intersection with the
    axial plane. Centers never move.
    """
    rule = (rules or REGION_RULES)[pred.region]
    n_a = pred.axial.e_w
    min_norm = np.sin(np.deg2rad(PARALLEL_TOL_DEG))
    n_c = pred.coronal.e_w
    n_s = pred.sagittal.e_w
    if rule.all_orthogonal:
        n_c = _unit_or_none(_reject(n_c, n_a), min_norm)
        if n_c is None:
            logger.warning("Axial and coronal normals of a %s triplet are parallel; coupling skipped", pred.region.value)
            return pred
        cross = np.cross(n_a, n_c)
        n_s = cross if cross @ pred.sagittal.e_w >= 0 else -cross
    elif ("axial", "sagittal") in rule.orthogonal_pairs:
        n_s = _unit_or_none(_reject(n_s, n_a), min_norm)
        if n_s is None:
            logger.warning("Axial and sagittal normals of a %s triplet are parallel; coupling skipped", pred.region.value)
            return pred
    coronal = _align_in_plane(pred.coronal, n_c, n_a)
    sagittal = _align_in_plane(pred.sagittal, n_s, n_a)
    if coronal is None or sagittal is None:
        logger.warning("A %s plane is parallel to the axial plane; coupling skipped", pred.region.value)
        return pred
    return pred.replace(coronal=coronal, sagittal=sagittal)


def intersection_angle(reference: Plane, plane: Plane) -> float:
    """Angle (deg, in [0, 90]) between the reference/plane intersection line and plane.e_u."""
    line = np.cross(reference.e_w, plane.e_w)
    if np.linalg.norm(line) < _PROJ_EPS:
        raise GeometryError("Planes are parallel; their intersection is undefined")
    a = angle_between(line, plane.e_u)
    return min(a, 180.0 - a)


@dataclass(frozen=True, eq=False)
class PlaneErrors:
    """Per-plane errors, ordered axial, coronal, sagittal."""

    d: np.ndarray
    eps_n: np.ndarray
    eps_i: np.ndarray

    def __post_init__(self):
        for name in ("d", "eps_n", "eps_i"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(len(PLANE_NAMES))
            object.__setattr__(self, name, arr)
        if np.any(self.d < 0) or np.any(self.eps_n < 0) or np.any(self.eps_i < 0):
            raise GeometryError("Plane errors must be non-negative")

    def plane_scores(self) -> np.ndarray:
        return WEIGHTS["d"] * self.d + WEIGHTS["eps_n"] * self.eps_n + WEIGHTS["eps_i"] * self.eps_i


@dataclass(frozen=True, eq=False)
class ScoreReport:
    errors: PlaneErrors
    p: float
    region: BodyRegion
    fold: int = 0
    volume: str = ""
    degenerate: Tuple[str, ...] = field(default_factory=tuple)

    def as_record(self) -> dict:
        record = {
            "volume": self.volume,
            "region": self.region.value,
            "fold": self.fold,
            "d": float(self.errors.d.mean()),
            "eps_n": float(self.errors.eps_n.mean()),
            "eps_i": float(self.errors.eps_i.mean()),
            "score": self.p,
        }
        for j, name in enumerate(PLANE_NAMES):
            record[f"d_{name}"] = float(self.errors.d[j])
            record[f"eps_n_{name}"] = float(self.errors.eps_n[j])
            record[f"eps_i_{name}"] = float(self.errors.eps_i[j])
        record["degenerate"] = list(self.degenerate)
        return record


def _in_plane_error(pred: Plane, truth: Plane) -> Tuple[float, bool]:
    angles = []
    for predicted, true in ((pred.e_u, truth.e_u), (pred.e_v, truth.e_v)):
        proj = _reject(predicted, truth.e_w)
        if np.linalg.norm(proj) < _PROJ_EPS:
            continue
        angles.append(angle_between(proj, true))
    if not angles:
        return 0.0, True
    return float(np.mean(angles)), len(angles) < 2


def score(pred: PlaneTriplet, truth: PlaneTriplet, fold: int = 0, volume: str = "") -> ScoreReport:
    """Weighted plane error of one volume; all positions in world mm."""
    if pred.region is not truth.region:
        raise GeometryError(f"Cannot score a {pred.region.value} prediction against {truth.region.value} truth")
    d, eps_n, eps_i = [], [], []
    degenerate = []
    for name, p_plane, t_plane in zip(PLANE_NAMES, pred, truth):
        d.append(abs(float((p_plane.center - t_plane.center) @ t_plane.e_w)))
        eps_n.append(angle_between(p_plane.e_w, t_plane.e_w))
        err, bad = _in_plane_error(p_plane, t_plane)
        eps_i.append(err)
        if bad:
            degenerate.append(name)
            logger.warning("Degenerate in-plane projection for the %s plane of %s", name, volume or "a volume")
    errors = PlaneErrors(np.array(d), np.array(eps_n), np.array(eps_i))
    return ScoreReport(errors, float(errors.plane_scores().mean()), truth.region, fold, volume, tuple(degenerate))


def reports_frame(reports: Sequence[ScoreReport]) -> pd.DataFrame:
    return pd.DataFrame([r.as_record() for r in reports])


def aggregate(reports: Union[Sequence[ScoreReport], Mapping[int, Sequence[ScoreReport]]]) -> pd.DataFrame:
    """Median per fold, then mean and sample standard deviation across folds.

    One row per (region, metric); region "all" pools every region. A single
    fold reports std 0.
    """
    if isinstance(reports, Mapping):
        empty = [fold for fold, items in reports.items() if not items]
        if empty:
            raise DataError(f"Folds without results: {empty}")
        reports = [r for items in reports.values() for r in items]
    if not reports:
        raise DataError("Nothing to aggregate")
    frame = reports_frame(reports)
    pooled = frame.assign(region="all")
    if frame["region"].nunique() > 1:
        frame = pd.concat([frame, pooled], ignore_index=True)
    medians = frame.groupby(["region", "fold"])[list(METRICS)].median()
    stats = medians.groupby(level="region").agg(["mean", "std", "count"])
    rows = []
    for region, row in stats.iterrows():
        for metric in METRICS:
            std = row[(metric, "std")]
            rows.append({
                "region": region,
                "metric": metric,
                "mean": float(row[(metric, "mean")]),
                "std": 0.0 if pd.isna(std) else float(std),
                "n_folds": int(row[(metric, "count")]),
            })
    return pd.DataFrame(rows, columns=["region", "metric", "mean", "std", "n_folds"])


def evaluate_state(
    state: ModelState,
    manifest: DatasetManifest,
    folds: Sequence[int],
    ip: IntensityParams = IntensityParams(),
    class_override: Optional[float] = None,
    batch_size: int = 16,
) -> Dict[str, List[ScoreReport]]:
    """Score every volume of the given folds before and after coupling."""
    entries = manifest.in_folds(folds)
    if not entries:
        raise DataError(f"No volumes in folds {list(folds)}")
    out: Dict[str, List[ScoreReport]] = {stage: [] for stage in STAGES}
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        volumes = [load_volume(manifest.volume_path(e))[0] for e in chunk]
        preds = infer_planes(state, volumes, [e.region for e in chunk], ip, batch_size, class_override)
        for entry, pred in zip(chunk, preds):
            out["regressed"].append(score(pred, entry.planes, entry.fold, entry.entry_id))
            out["postproc"].append(score(couple_planes(pred), entry.planes, entry.fold, entry.entry_id))
    return out


def median_score(reports: Sequence[ScoreReport]) -> float:
    return float(np.median([r.p for r in reports]))


def summary_frame(results: Mapping[str, Sequence[ScoreReport]], **labels) -> pd.DataFrame:
    """Aggregate per stage; extra keyword labels become constant columns."""
    frames = []
    for stage, reports in results.items():
        if reports:
            frames.append(aggregate(reports).assign(stage=stage, **labels))
    return pd.concat(frames, ignore_index=True)


def _cell(summary: pd.DataFrame, metric: str) -> str:
    row = summary[summary["metric"] == metric]
    if row.empty:
        return "-"
    return f"{row['mean'].iloc[0]:.2f} ± {row['std'].iloc[0]:.2f}"


def markdown_table(summary: pd.DataFrame, group_cols: Sequence[str] = ("region", "stage")) -> str:
    """Table with d, eps_n, eps_i and score as mean ± std, one row per group."""
    header = [*(c.replace("_", " ").title() for c in group_cols), "d (mm)", "ε_n (°)", "ε_i (°)", "Score"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for keys, group in summary.groupby(list(group_cols), sort=False):
        keys = keys if isinstance(keys, tuple) else (keys,)
        cells = [str(k) for k in keys] + [_cell(group, m) for m in METRICS]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def write_report(
    out_dir: Union[str, Path],
    title: str,
    records: Sequence[dict],
    summary: pd.DataFrame,
    group_cols: Sequence[str] = ("region", "stage"),
    config: Optional[dict] = None,
) -> Path:
    """raw_results.json (per-volume records), summary.csv and report.md."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = {"title": title, "config": config or {}, "results": list(records)}
    (out_dir / "raw_results.json").write_text(json.dumps(raw, indent=2))
    summary.to_csv(out_dir / "summary.csv", index=False, float_format="%.6f")
    report = [
        f"# {title}",
        "",
        "Mean ± standard deviation across folds of the per-fold median errors.",
        "",
        markdown_table(summary, group_cols),
        "",
    ]
    (out_dir / "report.md").write_text("\n".join(report))
    logger.info("Report written to %s", out_dir)
    return out_dir
