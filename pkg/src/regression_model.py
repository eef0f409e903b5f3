"""
PoseNet-shaped 3D CNN regressing three plane poses from one volume.

The trunk is a ladder of conv(3x3x3) -> ReLU -> batch norm -> max-pool(2)
blocks; its flattened output feeds fully connected heads FC1 -> ReLU ->
FC2 -> ReLU -> FC3. Three variants share this layout:

  baseline    one head, region ignored
  with_class  one head, a region one-hot appended to the FC1 input
  multi_head  one head per region, each sample routed to its region's head

Forward and backward passes are written out by hand on numpy arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import layers
from .augmentation import IntensityParams, Volume, normalize_intensity, resample
from .config import N_PLANES, ModelConfig, ModelVariant
from .errors import DataError, GeometryError
from .geometry import (
    BodyRegion,
    PlaneTriplet,
    RigidTransform,
    VolumeMeta,
    denormalize_translation,
    normalize_translation,
    plane_from_transform,
    transform_from_plane,
)
from .rotation_codecs import RepresentationKind, RotationEncoding, decode, encode, encoding_size

logger = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "ModelState",
    "RegressionTarget",
    "BackwardResult",
    "init_state",
    "forward",
    "backward",
    "apply_batch_stats",
    "predict_planes",
    "preprocess",
    "infer_planes",
    "targets_for",
    "decode_output",
    "parameter_count",
]

N_FC = 3


@dataclass(eq=False)
class ModelState:
    """Trainable parameters plus batch-norm running statistics, keyed by name."""

    cfg: ModelConfig
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]

    def copy(self) -> "ModelState":
        return ModelState(
            self.cfg,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in (*self.params.values(), *self.buffers.values()))


@dataclass(frozen=True, eq=False)
class RegressionTarget:
    """Per plane: normalized center (3 values) followed by the rotation encoding."""

    translations: np.ndarray
    encodings: Tuple[RotationEncoding, ...]

    def __post_init__(self):
        translations = np.asarray(self.translations, dtype=np.float64).reshape(N_PLANES, 3)
        if len(self.encodings) != N_PLANES:
            raise GeometryError(f"Need {N_PLANES} rotation encodings, got {len(self.encodings)}")
        object.__setattr__(self, "translations", translations)
        if np.any(np.abs(self.vector) > 1.0):
            raise GeometryError("Regression target components must lie in [-1, 1]")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([t, e.values]) for t, e in zip(self.translations, self.encodings)])


@dataclass(eq=False)
class BackwardResult:
    loss: float
    grads: Dict[str, np.ndarray]
    batch_stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    predictions: Optional[np.ndarray] = None


def _conv_name(i: int) -> str:
    return f"conv{i}"


def _fc_name(head: int, j: int) -> str:
    return f"head{head}.fc{j}"


def init_state(cfg: ModelConfig, seed: int = 0) -> ModelState:
    """He fan-in initialisation; zero biases; batch norm starts as the identity."""
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype
    params: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    in_ch = 1
    for i, out_ch in enumerate(cfg.conv_channels):
        fan_in = in_ch * 27
        params[f"{_conv_name(i)}.weight"] = (rng.standard_normal((out_ch, in_ch, 3, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[f"{_conv_name(i)}.bias"] = np.zeros(out_ch, dtype=dtype)
        params[f"bn{i}.weight"] = np.ones(out_ch, dtype=dtype)
        params[f"bn{i}.bias"] = np.zeros(out_ch, dtype=dtype)
        buffers[f"bn{i}.running_mean"] = np.zeros(out_ch, dtype=dtype)
        buffers[f"bn{i}.running_var"] = np.ones(out_ch, dtype=dtype)
        in_ch = out_ch
    widths = (cfg.fc_in, *cfg.fc_widths, cfg.out_size)
    for head in range(cfg.n_heads):
        for j in range(N_FC):
            n_in, n_out = widths[j], widths[j + 1]
            params[f"{_fc_name(head, j + 1)}.weight"] = (rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)).astype(dtype)
            params[f"{_fc_name(head, j + 1)}.bias"] = np.zeros(n_out, dtype=dtype)
    return ModelState(cfg, params, buffers)


def parameter_count(state: ModelState, prefix: str = "") -> int:
    return int(sum(v.size for k, v in state.params.items() if k.startswith(prefix)))


def trunk_parameter_count(state: ModelState) -> int:
    return parameter_count(state, "conv") + parameter_count(state, "bn")


def _check_batch(cfg: ModelConfig, volumes: np.ndarray) -> np.ndarray:
    x = np.asarray(volumes)
    if x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != cfg.input_dims:
        raise DataError(f"Expected a batch shaped (N, {cfg.input_dims}), got {np.shape(volumes)}")
    if x.shape[0] == 0:
        raise DataError("Empty batch")
    return x.astype(cfg.np_dtype, copy=False)


def _check_regions(cfg: ModelConfig, region_ids, n: int) -> Optional[np.ndarray]:
    if cfg.variant is ModelVariant.BASELINE:
        return None
    if region_ids is None:
        raise DataError(f"The {cfg.variant.value} variant needs region ids")
    ids = np.array([BodyRegion(r).index if isinstance(r, (str, BodyRegion)) else int(r) for r in np.ravel(region_ids)])
    if ids.shape != (n,):
        raise DataError(f"Got {ids.size} region ids for a batch of {n}")
    if np.any((ids < 0) | (ids >= cfg.n_regions)):
        raise DataError(f"Unknown region id in {ids.tolist()}")
    return ids


def _class_block(cfg: ModelConfig, ids: np.ndarray, override: Optional[float]) -> np.ndarray:
    if override is not None:
        return np.full((ids.size, cfg.n_regions), override, dtype=cfg.np_dtype)
    return np.eye(cfg.n_regions, dtype=cfg.np_dtype)[ids]


def _trunk_forward(state: ModelState, x: np.ndarray, train: bool):
    cfg = state.cfg
    caches: List[tuple] = []
    stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for i in range(len(cfg.conv_channels)):
        conv, c_conv = layers.conv3d_forward(x, state.params[f"conv{i}.weight"], state.params[f"conv{i}.bias"])
        act, c_relu = layers.relu_forward(conv)
        normed, c_bn, batch = layers.batchnorm_forward(
            act,
            state.params[f"bn{i}.weight"],
            state.params[f"bn{i}.bias"],
            state.buffers[f"bn{i}.running_mean"],
            state.buffers[f"bn{i}.running_var"],
            train=train,
            eps=cfg.bn_eps,
        )
        x, c_pool = layers.maxpool_forward(normed)
        caches.append((c_conv, c_relu, c_bn, c_pool))
        if train:
            stats[f"bn{i}"] = batch
    return x.reshape(x.shape[0], -1), caches, stats


def _head_forward(state: ModelState, head: int, h: np.ndarray):
    caches = []
    for j in range(1, N_FC + 1):
        h, c_fc = layers.linear_forward(h, state.params[f"{_fc_name(head, j)}.weight"], state.params[f"{_fc_name(head, j)}.bias"])
        c_relu = None
        if j < N_FC:
            h, c_relu = layers.relu_forward(h)
        caches.append((c_fc, c_relu))
    return h, caches


def _forward(state: ModelState, volumes, region_ids, train: bool, class_override: Optional[float]):
    cfg = state.cfg
    x = _check_batch(cfg, volumes)
    ids = _check_regions(cfg, region_ids, x.shape[0])
    features, trunk_caches, stats = _trunk_forward(state, x, train)
    if cfg.variant is ModelVariant.WITH_CLASS:
        features = np.concatenate([features, _class_block(cfg, ids, class_override)], axis=1)
    out = np.zeros((x.shape[0], cfg.out_size), dtype=cfg.np_dtype)
    head_caches: Dict[int, tuple] = {}
    if cfg.variant is ModelVariant.MULTI_HEAD:
        for head in range(cfg.n_heads):
            rows = np.flatnonzero(ids == head)
            if rows.size:
                out[rows], caches = _head_forward(state, head, features[rows])
                head_caches[head] = (rows, caches)
    else:
        out[:], caches = _head_forward(state, 0, features)
        head_caches[0] = (np.arange(x.shape[0]), caches)
    return out, (trunk_caches, head_caches, features.shape), stats


def forward(
    state: ModelState,
    volumes: np.ndarray,
    region_ids: Optional[Sequence] = None,
    train: bool = False,
    class_override: Optional[float] = None,
) -> np.ndarray:
    """Raw network outputs (N, out_size) for a batch of normalized grids.

    region_ids are ignored by the baseline, form the one-hot for with_class
    (unless class_override fills every class node with one constant) and pick
    the head for multi_head.
    """
    out, _, _ = _forward(state, volumes, region_ids, train, class_override)
    return out


def backward(
    state: ModelState,
    volumes: np.ndarray,
    region_ids: Optional[Sequence],
    targets: np.ndarray,
    train: bool = True,
) -> BackwardResult:
    """MSE loss over every output node and its gradients for all parameters.

    Heads without samples in the batch get exactly zero gradients; the trunk
    sums the gradients of every head.
    """
    cfg = state.cfg
    out, (trunk_caches, head_caches, feat_shape), stats = _forward(state, volumes, region_ids, train, None)
    targets = np.asarray(targets, dtype=cfg.np_dtype)
    if targets.shape != out.shape:
        raise DataError(f"Targets shaped {targets.shape} do not match outputs {out.shape}")
    diff = out - targets
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    d_out = (2.0 / diff.size) * diff

    grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    d_feat = np.zeros(feat_shape, dtype=cfg.np_dtype)
    for head, (rows, caches) in head_caches.items():
        g = d_out[rows]
        for j in range(N_FC, 0, -1):
            c_fc, c_relu = caches[j - 1]
            if c_relu is not None:
                g = layers.relu_backward(g, c_relu)
            g, dw, db = layers.linear_backward(g, c_fc)
            grads[f"{_fc_name(head, j)}.weight"] = dw
            grads[f"{_fc_name(head, j)}.bias"] = db
        d_feat[rows] += g

    d_feat = d_feat[:, : cfg.flat_features]
    last = len(cfg.conv_channels) - 1
    n = d_feat.shape[0]
    g = d_feat.reshape((n, cfg.conv_channels[-1], *cfg.stage_dims[-1]))
    for i in range(last, -1, -1):
        c_conv, c_relu, c_bn, c_pool = trunk_caches[i]
        g = layers.maxpool_backward(g, c_pool)
        g, dgamma, dbeta = layers.batchnorm_backward(g, c_bn)
        grads[f"bn{i}.weight"] = dgamma
        grads[f"bn{i}.bias"] = dbeta
        g = layers.relu_backward(g, c_relu)
        dx, dw, db = layers.conv3d_backward(g, c_conv, need_dx=i > 0)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
        g = dx
    return BackwardResult(loss=loss, grads=grads, batch_stats=stats, predictions=out)


def apply_batch_stats(state: ModelState, stats: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> None:
    """Exponential update of the running statistics (momentum cfg.bn_momentum)."""
    m = state.cfg.bn_momentum
    for name, (mean, var) in stats.items():
        rm = state.buffers[f"{name}.running_mean"]
        rv = state.buffers[f"{name}.running_var"]
        rm *= 1.0 - m
        rm += m * mean
        rv *= 1.0 - m
        rv += m * var


def targets_for(planes: PlaneTriplet, kind: RepresentationKind, meta: VolumeMeta) -> RegressionTarget:
    """Normalized centers and rotation encodings of a plane triplet."""
    translations = []
    encodings = []
    for plane in planes:
        t = transform_from_plane(plane)
        translations.append(normalize_translation(t.translation, meta))
        encodings.append(encode(t.rotation, kind))
    return RegressionTarget(np.stack(translations), tuple(encodings))


def decode_output(raw: np.ndarray, kind: RepresentationKind, meta: VolumeMeta, region: BodyRegion) -> PlaneTriplet:
    """Split a raw output vector per plane, decode rotations and de-normalize centers."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    step = 3 + encoding_size(kind)
    if raw.size != N_PLANES * step:
        raise DataError(f"Expected {N_PLANES * step} outputs for {RepresentationKind(kind).value}, got {raw.size}")
    planes = []
    for j in range(N_PLANES):
        chunk = raw[j * step:(j + 1) * step]
        rotation = decode(RotationEncoding(kind, chunk[3:]))
        center = denormalize_translation(chunk[:3], meta)
        planes.append(plane_from_transform(RigidTransform(rotation, center)))
    return PlaneTriplet(*planes, region=region)


def predict_planes(
    state: ModelState,
    volume: np.ndarray,
    region: BodyRegion,
    meta: VolumeMeta,
    class_override: Optional[float] = None,
) -> PlaneTriplet:
    """Planes of one normalized grid, before any coupling post-processing."""
    region = BodyRegion(region)
    raw = forward(state, np.asarray(volume)[None], [region.index], train=False, class_override=class_override)
    return decode_output(raw[0], state.cfg.representation, meta, region)


def preprocess(
    volume: Volume, input_dims: Tuple[int, int, int], ip: IntensityParams = IntensityParams()
) -> Tuple[np.ndarray, VolumeMeta]:
    """Resample a HU volume onto the network grid (same field of view) and normalize it."""
    grid = resample(volume, np.eye(4), out_dims=input_dims)
    return normalize_intensity(grid.voxels, ip).astype(np.float32), grid.meta


def infer_planes(
    state: ModelState,
    volumes: Sequence[Volume],
    regions: Sequence[BodyRegion],
    ip: IntensityParams = IntensityParams(),
    batch_size: int = 16,
    class_override: Optional[float] = None,
) -> List[PlaneTriplet]:
    """Regressed (uncoupled) planes for HU volumes, in each volume's world frame."""
    if len(volumes) != len(regions):
        raise DataError(f"Got {len(volumes)} volumes but {len(regions)} regions")
    cfg = state.cfg
    out: List[PlaneTriplet] = []
    for start in range(0, len(volumes), batch_size):
        chunk = list(zip(volumes[start:start + batch_size], regions[start:start + batch_size]))
        prepared = [preprocess(v, cfg.input_dims, ip) for v, _ in chunk]
        ids = [BodyRegion(r).index for _, r in chunk]
        raw = forward(state, np.stack([g for g, _ in prepared]), ids, class_override=class_override)
        for row, (_, meta), (_, region) in zip(raw, prepared, chunk):
            out.append(decode_output(row, cfg.representation, meta, BodyRegion(region)))
    return out
