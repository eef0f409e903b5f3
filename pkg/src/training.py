"""
Mini-batch training with momentum SGD, step learning-rate decay and
region-balanced oversampling.

Fold roles follow fold_roles: fold i is held out for testing, fold i+1
validates (checkpoint selection by median coupled score) and the rest trains.
Every training sample is augmented with a generator seeded from
(run seed, fold, epoch, position in epoch), so the trajectory does not depend
on how many worker threads prepare batches.
"""

from __future__ import annotations

import json
import logging
import tempfile
from collections import defaultdict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .augmentation import IntensityParams, Volume, augment_sample, inference_intensity, sample_params
from .checkpoint import save_checkpoint
from .config import AugmentConfig, Hyperparams, IntensityConfig, ModelConfig, RunConfig
from .errors import DataError, NumericalFailure
from .evaluation import couple_planes, median_score, score
from .geometry import BodyRegion
from .phantom_data import DatasetManifest, ManifestEntry, fold_roles, load_volume
from .regression_model import ModelState, apply_batch_stats, backward, infer_planes, init_state, targets_for

logger = logging.getLogger(__name__)

__all__ = [
    "Hyperparams",
    "TrainRun",
    "TrainResult",
    "EpochRecord",
    "MomentumSGD",
    "learning_rate",
    "mse_loss",
    "oversample_schedule",
    "sample_hyperparams",
    "train",
]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    val_score: Optional[float] = None


@dataclass(eq=False)
class TrainRun:
    manifest: DatasetManifest
    fold: int
    model: ModelConfig
    hparams: Hyperparams
    seed: int = 0
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    intensity: IntensityConfig = field(default_factory=IntensityConfig)
    out_dir: Optional[Path] = None
    history: List[EpochRecord] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None

    @classmethod
    def from_config(cls, cfg: RunConfig, manifest: DatasetManifest, out_dir: Optional[Union[str, Path]] = None) -> "TrainRun":
        return cls(
            manifest=manifest,
            fold=cfg.data.fold,
            model=cfg.model,
            hparams=cfg.train,
            seed=cfg.seed,
            aug=cfg.aug,
            intensity=cfg.intensity,
            out_dir=Path(out_dir) if out_dir is not None else None,
        )


@dataclass(eq=False)
class TrainResult:
    state: ModelState
    best_state: ModelState
    history: List[EpochRecord]
    best_epoch: int
    checkpoints: Dict[str, Path] = field(default_factory=dict)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean of squared differences over every output node and sample."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"Prediction shape {pred.shape} does not match target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def learning_rate(h: Hyperparams, epoch: int) -> float:
    """Step decay: lr * lr_decay ** ((epoch - 1) // decay_step), epochs counted from 1."""
    return h.lr * h.lr_decay ** ((epoch - 1) // h.decay_step)


class MomentumSGD:
    """Classic (Polyak) momentum: v <- mu v - lr g;  w <- w + v. Updates in place."""

    def __init__(self, params: Dict[str, np.ndarray], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, w in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * grads[name]
            w += v


def oversample_schedule(m: DatasetManifest, fold: int, seed: int, epoch: int = 0) -> List[ManifestEntry]:
    """One epoch of training entries with every region drawn equally often.

    Each region contributes as many draws as the largest region has volumes;
    smaller regions cycle through fresh permutations of their volumes, so a
    volume's draw probability is inversely proportional to its region's size.
    """
    roles = fold_roles(fold, m.n_folds)
    train_entries = m.in_folds(roles["train"])
    if not train_entries:
        raise DataError(f"No training volumes for test fold {fold}")
    by_region: Dict[BodyRegion, List[ManifestEntry]] = defaultdict(list)
    for entry in train_entries:
        by_region[entry.region].append(entry)
    missing = {e.region for e in m.entries} - set(by_region)
    if missing:
        raise DataError(f"Regions without training volumes: {sorted(r.value for r in missing)}")
    rng = np.random.default_rng([seed, fold, epoch])
    quota = max(len(v) for v in by_region.values())
    drawn: List[ManifestEntry] = []
    for region in BodyRegion:
        pool = by_region.get(region)
        if not pool:
            continue
        reps = -(-quota // len(pool))
        order = np.concatenate([rng.permutation(len(pool)) for _ in range(reps)])[:quota]
        drawn.extend(pool[i] for i in order)
    return [drawn[i] for i in rng.permutation(len(drawn))]


def sample_hyperparams(seed: int, epochs: int = 50, workers: int = 1) -> Hyperparams:
    """One random-search draw: log-uniform lr, decay and momentum; uniform step and batch size."""
    rng = np.random.default_rng(seed)

    def log_uniform(lo: float, hi: float) -> float:
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    return Hyperparams(
        lr=log_uniform(1e-4, 1e-2),
        lr_decay=log_uniform(0.2, 0.9),
        decay_step=int(rng.integers(20, 81)),
        momentum=log_uniform(0.5, 0.99),
        batch_size=int(rng.integers(5, 13)),
        epochs=epochs,
        workers=workers,
    )


def _sample_rng(seed: int, fold: int, epoch: int, position: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, fold, epoch, position]))


def _prepare(run: TrainRun, volume: Volume, entry: ManifestEntry, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    spatial, ip = sample_params(rng, run.aug, run.intensity)
    grid, planes, meta = augment_sample(volume, entry.planes, spatial, ip, run.model.input_dims)
    return grid, targets_for(planes, run.model.representation, meta).vector


def _load_volumes(m: DatasetManifest, entries: Sequence[ManifestEntry], workers: int) -> Dict[str, Volume]:
    with ThreadPoolExecutor(max_workers=workers) as pool:
        loaded = pool.map(lambda e: load_volume(m.volume_path(e))[0], entries)
        return {e.volume: v for e, v in zip(entries, loaded)}


def _snapshot(run: TrainRun, state: ModelState, epoch: int, batch: int, entries: Sequence[ManifestEntry]) -> Path:
    out_dir = run.out_dir or Path(tempfile.mkdtemp(prefix="mpr-nan-"))
    out_dir.mkdir(parents=True, exist_ok=True)
    path = save_checkpoint(out_dir / "nan_snapshot.ckpt", state, {"epoch": epoch, "batch": batch})
    info = {"epoch": epoch, "batch": batch, "entries": [e.entry_id for e in entries], "checkpoint": str(path)}
    (out_dir / "nan_snapshot.json").write_text(json.dumps(info, indent=2))
    return path


def validate(
    state: ModelState, entries: Sequence[ManifestEntry], volumes: Dict[str, Volume], ip: IntensityParams
) -> float:
    """Median coupled score over the validation entries."""
    preds = infer_planes(state, [volumes[e.volume] for e in entries], [e.region for e in entries], ip)
    return median_score([score(couple_planes(p), e.planes, e.fold, e.entry_id) for p, e in zip(preds, entries)])


def train(run: TrainRun) -> TrainResult:
    h = run.hparams
    roles = fold_roles(run.fold, run.manifest.n_folds)
    val_entries = run.manifest.in_folds(roles["validation"])
    state = init_state(run.model, seed=run.seed)
    optimizer = MomentumSGD(state.params, h.momentum)
    ip = inference_intensity(run.intensity)
    volumes = _load_volumes(run.manifest, run.manifest.in_folds(roles["train"] + roles["validation"]), h.workers)
    logger.info(
        "Training %s/%s on fold %d: %d training, %d validation volumes",
        run.model.variant.value, run.model.representation.value, run.fold, len(volumes) - len(val_entries), len(val_entries),
    )

    best_score = np.inf
    best_state = state.copy()
    best_epoch = 0
    checkpoints: Dict[str, Path] = {}
    run.history.clear()
    with ThreadPoolExecutor(max_workers=h.workers) as pool:
        for epoch in range(1, h.epochs + 1):
            lr = learning_rate(h, epoch)
            schedule = oversample_schedule(run.manifest, run.fold, run.seed, epoch)
            batches = [schedule[i:i + h.batch_size] for i in range(0, len(schedule), h.batch_size)]

            def submit(b: int) -> List[Future]:
                start = b * h.batch_size
                return [
                    pool.submit(_prepare, run, volumes[e.volume], e, _sample_rng(run.seed, run.fold, epoch, start + k))
                    for k, e in enumerate(batches[b])
                ]

            losses = []
            pending = submit(0)
            for b in range(len(batches)):
                prepared = [f.result() for f in pending]
                # Prefetch the next batch while this one trains.
                pending = submit(b + 1) if b + 1 < len(batches) else []
                grids = np.stack([g for g, _ in prepared])
                targets = np.stack([t for _, t in prepared])
                regions = [e.region.index for e in batches[b]]
                result = backward(state, grids, regions, targets)
                finite = np.isfinite(result.loss) and all(np.all(np.isfinite(g)) for g in result.grads.values())
                if not finite:
                    path = _snapshot(run, state, epoch, b, batches[b])
                    raise NumericalFailure(f"Non-finite loss at epoch {epoch}, batch {b}; snapshot at {path}", str(path))
                optimizer.step(result.grads, lr)
                apply_batch_stats(state, result.batch_stats)
                losses.append(result.loss)

            val = validate(state, val_entries, volumes, ip) if val_entries else None
            record = EpochRecord(epoch, float(np.mean(losses)), lr, val)
            run.history.append(record)
            logger.info(
                "epoch %d/%d  loss %.5f  lr %.2e%s", epoch, h.epochs, record.loss, lr,
                "" if val is None else f"  val {val:.3f}",
            )
            if val is not None and val < best_score:
                best_score, best_epoch = val, epoch
                best_state = state.copy()
                if run.out_dir is not None:
                    checkpoints["best"] = save_checkpoint(
                        run.out_dir / "best.ckpt", state, {"epoch": epoch, "val_score": val, "fold": run.fold}
                    )

    if best_epoch == 0:
        best_state, best_epoch = state.copy(), h.epochs
    if run.out_dir is not None:
        checkpoints["final"] = save_checkpoint(
            run.out_dir / "final.ckpt", state, {"epoch": h.epochs, "fold": run.fold, "seed": run.seed}
        )
        checkpoints.setdefault("best", checkpoints["final"])
        run.checkpoint_path = checkpoints["best"]
        history = [r.__dict__ for r in run.history]
        (run.out_dir / "history.json").write_text(json.dumps(history, indent=2))
    return TrainResult(state, best_state, list(run.history), best_epoch, checkpoints)
