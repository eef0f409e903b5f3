#!/usr/bin/env python3
"""
Main script for standard-plane regression on CBCT volumes.
Provides a command-line interface for data generation, training, evaluation
and the desk-scale studies.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure during training.
"""

import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import click
import numpy as np
import typer

# Add the project root to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from experiments.ablation.representation_ablation import RepresentationAblationExperiment
from experiments.class_corruption.class_provision import ClassCorruptionExperiment
from experiments.data_sweep.training_fraction_sweep import TrainingFractionExperiment
from src.augmentation import inference_intensity, sample_plane
from src.checkpoint import load_checkpoint
from src.config import ModelVariant, RunConfig, load_config
from src.errors import ConfigError, PlaneRegressionError
from src.evaluation import couple_planes, evaluate_state, summary_frame, write_report
from src.phantom_data import STANDARD_FRACTIONS, fold_roles, generate_dataset, load_manifest, load_volume, reduce_training_set
from src.regression_model import infer_planes
from src.rotation_codecs import RepresentationKind
from src.training import TrainRun, sample_hyperparams, train
from utils.display import RunDisplay, console, setup_logging

app = typer.Typer(help="Standard-plane regression for CBCT volumes", no_args_is_help=True)

CONFIG_OPT = typer.Option(None, "--config", help="JSON config file (nested sections or dotted keys)")
SEED_OPT = typer.Option(None, "--seed", help="Run seed; overrides the config")
WORKERS_OPT = typer.Option(None, "--workers", min=1, help="Worker threads for data preparation")


def _config(
    config: Optional[Path],
    seed: Optional[int] = None,
    fold: Optional[int] = None,
    variant: Optional[ModelVariant] = None,
    representation: Optional[RepresentationKind] = None,
    fraction: Optional[float] = None,
    workers: Optional[int] = None,
) -> RunConfig:
    cfg = load_config(str(config) if config is not None else None)
    return cfg.with_overrides(
        seed=seed,
        fold=fold,
        variant=variant.value if variant is not None else None,
        representation=representation.value if representation is not None else None,
        fraction=fraction,
        workers=workers,
    )


@app.callback()
def main_options(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")):
    setup_logging(verbose)


@app.command("gen-data")
def gen_data(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    out: Optional[Path] = typer.Option(None, "--out", help="Dataset directory (default: the manifest's directory)"),
    workers: Optional[int] = WORKERS_OPT,
):
    """Render phantom volumes and write the dataset manifest."""
    cfg = _config(config, seed=seed, workers=workers)
    out_dir = out or Path(cfg.data.manifest).parent
    RunDisplay.display_header("🧪 Phantom Dataset", f"{cfg.data.n_per_region} volumes per region → {out_dir}")
    manifest = generate_dataset(
        out_dir,
        cfg.data.n_per_region,
        seed=cfg.seed,
        hard_fraction=cfg.data.hard_fraction,
        pair_fraction=cfg.data.pair_fraction,
        imbalanced=cfg.data.imbalanced,
        dims=cfg.data.dims,
        spacing_mm=cfg.data.spacing_mm,
        workers=cfg.train.workers,
    )
    RunDisplay.display_manifest(manifest)
    console.print(f"[green]✅ Manifest written to {out_dir / 'manifest.json'}[/green]")


@app.command("train")
def train_cmd(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    fold: Optional[int] = typer.Option(None, "--fold", help="Test fold 0-4; fold+1 validates"),
    variant: Optional[ModelVariant] = typer.Option(None, "--variant"),
    representation: Optional[RepresentationKind] = typer.Option(None, "--repr"),
    fraction: Optional[float] = typer.Option(None, "--fraction", help="Share of training volumes to keep"),
    out: Path = typer.Option(Path("runs/train"), "--out", help="Run directory"),
    workers: Optional[int] = WORKERS_OPT,
):
    """Train one model on one fold and score its test fold."""
    cfg = _config(config, seed, fold, variant, representation, fraction, workers)
    manifest = load_manifest(cfg.data.manifest)
    manifest = reduce_training_set(manifest, cfg.data.fraction, test_fold=cfg.data.fold, seed=cfg.seed)
    RunDisplay.display_header(
        "🏋️ Training",
        f"{cfg.model.variant.value} / {cfg.model.representation.value}, fold {cfg.data.fold}, {cfg.train.epochs} epochs",
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    result = train(TrainRun.from_config(cfg, manifest, out))
    RunDisplay.display_history(result.history)

    test = fold_roles(cfg.data.fold, manifest.n_folds)["test"]
    results = evaluate_state(result.best_state, manifest, test, inference_intensity(cfg.intensity))
    summary = summary_frame(results)
    records = [{"stage": stage, **r.as_record()} for stage, reports in results.items() for r in reports]
    write_report(out, f"Test fold {cfg.data.fold}", records, summary, config=cfg.to_dict())
    RunDisplay.display_summary(summary, f"Test fold {cfg.data.fold} (best epoch {result.best_epoch})")
    console.print(f"[green]✅ Checkpoints in {out}[/green]")


@app.command("evaluate")
def evaluate_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint to score"),
    config: Optional[Path] = CONFIG_OPT,
    fold: Optional[int] = typer.Option(None, "--fold", help="Test fold 0-4"),
    out: Path = typer.Option(Path("runs/evaluate"), "--out", help="Report directory"),
):
    """Score a checkpoint on a test fold, before and after plane coupling."""
    cfg = _config(config, fold=fold)
    state, meta = load_checkpoint(checkpoint)
    manifest = load_manifest(cfg.data.manifest)
    test = fold_roles(cfg.data.fold, manifest.n_folds)["test"]
    results = evaluate_state(state, manifest, test, inference_intensity(cfg.intensity))
    summary = summary_frame(results)
    records = [{"stage": stage, **r.as_record()} for stage, reports in results.items() for r in reports]
    write_report(out, f"Evaluation of {checkpoint.name}, fold {cfg.data.fold}", records, summary,
                 config={"checkpoint": str(checkpoint), "checkpoint_metadata": meta, **cfg.to_dict()})
    RunDisplay.display_summary(summary, f"{checkpoint.name} on fold {cfg.data.fold}")


@app.command("convert")
def convert_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Trained checkpoint"),
    volume: Path = typer.Option(..., "--volume", help="Raw float32 volume with .hdr sidecar"),
    config: Optional[Path] = CONFIG_OPT,
    out: Path = typer.Option(Path("runs/convert"), "--out", help="Output directory"),
    slices: bool = typer.Option(False, "--slices", help="Also write the three MPR slices as .npz"),
):
    """Regress and couple the standard planes of one volume."""
    cfg = _config(config)
    state, _ = load_checkpoint(checkpoint)
    vol, region = load_volume(volume)
    regressed = infer_planes(state, [vol], [region], inference_intensity(cfg.intensity))[0]
    planes = couple_planes(regressed)
    out.mkdir(parents=True, exist_ok=True)
    record = {"volume": str(volume), "region": region.value, "planes": planes.as_dict(), "regressed": regressed.as_dict()}
    (out / f"{volume.stem}_planes.json").write_text(json.dumps(record, indent=2))
    if slices:
        size = (vol.meta.dims[0], vol.meta.dims[1])
        images = {name: sample_plane(vol, plane, size) for name, plane in planes.planes().items()}
        np.savez(out / f"{volume.stem}_mpr.npz", **images)
    RunDisplay.display_planes(planes)
    console.print(f"[green]✅ Planes written to {out}[/green]")


@app.command("ablate")
def ablate_cmd(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    fold: Optional[int] = typer.Option(None, "--fold", help="Single fold (default: all five)"),
    variant: Optional[ModelVariant] = typer.Option(None, "--variant"),
    representation: Optional[RepresentationKind] = typer.Option(None, "--repr", help="Single representation (default: all four)"),
    out: Path = typer.Option(Path("experiments/ablation/results"), "--out"),
    workers: Optional[int] = WORKERS_OPT,
):
    """Compare rotation representations, regressed and post-processed."""
    cfg = _config(config, seed, fold, variant, None, None, workers)
    RunDisplay.display_header("🔬 Representation Ablation", f"variant {cfg.model.variant.value}")
    experiment = RepresentationAblationExperiment(
        cfg, load_manifest(cfg.data.manifest), str(out),
        folds=None if fold is None else [fold],
        representations=None if representation is None else [representation],
    )
    summary = experiment.run_all_experiments()
    RunDisplay.display_summary(summary, "Representation ablation", experiment.group_cols)


@app.command("sweep-data")
def sweep_data_cmd(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    fold: Optional[int] = typer.Option(None, "--fold", help="Single fold (default: all five)"),
    variant: Optional[ModelVariant] = typer.Option(None, "--variant"),
    representation: Optional[RepresentationKind] = typer.Option(None, "--repr"),
    fraction: Optional[float] = typer.Option(None, "--fraction", help="Single fraction (default: 1.0, 0.8, 0.6, 0.4)"),
    out: Path = typer.Option(Path("experiments/data_sweep/results"), "--out"),
    workers: Optional[int] = WORKERS_OPT,
):
    """Train on shrinking shares of the training volumes."""
    cfg = _config(config, seed, fold, variant, representation, fraction, workers)
    fractions = STANDARD_FRACTIONS if fraction is None else (cfg.data.fraction,)
    RunDisplay.display_header("📉 Training Set Size Sweep", ", ".join(f"{f:.0%}" for f in fractions))
    experiment = TrainingFractionExperiment(
        cfg, load_manifest(cfg.data.manifest), str(out),
        folds=None if fold is None else [fold], fractions=fractions,
    )
    summary = experiment.run_all_experiments()
    RunDisplay.display_summary(summary, "Training set size sweep", experiment.group_cols)


@app.command("corrupt-class")
def corrupt_class_cmd(
    config: Optional[Path] = CONFIG_OPT,
    seed: Optional[int] = SEED_OPT,
    fold: Optional[int] = typer.Option(None, "--fold", help="Single fold (default: all five)"),
    variant: Optional[ModelVariant] = typer.Option(None, "--variant"),
    representation: Optional[RepresentationKind] = typer.Option(None, "--repr"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="with_class checkpoint for --fold"),
    out: Path = typer.Option(Path("experiments/class_corruption/results"), "--out"),
    workers: Optional[int] = WORKERS_OPT,
):
    """Score a class-conditioned model with true and diffuse class inputs."""
    cfg = _config(config, seed, fold, variant, representation, None, workers)
    if checkpoint is not None and fold is None:
        raise ConfigError("--checkpoint applies to a single fold; pass --fold as well")
    RunDisplay.display_header("🏷️ Class Information Corruption", "true one-hot vs 0.0 / 0.5 / 1.0")
    experiment = ClassCorruptionExperiment(
        cfg, load_manifest(cfg.data.manifest), str(out),
        folds=None if fold is None else [fold],
        checkpoints=None if checkpoint is None else {fold: checkpoint},
    )
    summary = experiment.run_all_experiments()
    RunDisplay.display_summary(summary, "Class information corruption", experiment.group_cols)


@app.command("search-hparams")
def search_hparams_cmd(
    seed: int = typer.Option(0, "--seed"),
    n: int = typer.Option(10, "--n", min=1, help="Number of draws"),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the draws as JSON here"),
):
    """Draw hyper-parameter candidates from the random-search distributions."""
    draws = [asdict(sample_hyperparams(seed + i)) for i in range(n)]
    RunDisplay.display_hyperparams(draws)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(draws, indent=2))


def main() -> int:
    try:
        result = app(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        console.print("[yellow]👋 Aborted[/yellow]")
        return 1
    except PlaneRegressionError as exc:
        console.print(f"[red]❌ {type(exc).__name__}: {exc}[/red]")
        return exc.exit_code
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
