#!/usr/bin/env python3
"""
Class Information Corruption

Scores a class-conditioned model with the true region one-hot and with every
class node forced to the same diffuse value of 0.0, 0.5 or 1.0.
"""

import logging
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

sys.path.append(str(Path(__file__).resolve().parents[2]))

from experiments.common import StudyExperiment
from src.checkpoint import load_checkpoint
from src.config import ModelVariant, RunConfig
from src.errors import ConfigError
from src.phantom_data import DatasetManifest, load_manifest
from src.regression_model import ModelState

logger = logging.getLogger(__name__)

# label -> constant written into every class node (None keeps the true one-hot)
PROVISION_LEVELS: Dict[str, Optional[float]] = {"true": None, "0.0": 0.0, "0.5": 0.5, "1.0": 1.0}


class ClassCorruptionExperiment(StudyExperiment):
    title = "Class Information Corruption"
    group_cols = ("provision", "region", "stage")

    def __init__(
        self,
        cfg: RunConfig,
        manifest: DatasetManifest,
        output_dir: str = "experiments/class_corruption/results",
        folds: Optional[Sequence[int]] = None,
        checkpoints: Optional[Dict[int, Union[str, Path]]] = None,
    ):
        super().__init__(cfg, manifest, output_dir, folds)
        self.checkpoints = {int(k): Path(v) for k, v in (checkpoints or {}).items()}
        missing = [f for f in self.folds if f not in self.checkpoints]
        if missing and cfg.model.variant is not ModelVariant.WITH_CLASS:
            raise ConfigError(
                f"Class corruption needs a with_class model; got variant {cfg.model.variant.value} "
                f"and no checkpoint for folds {missing}"
            )

    def state_for(self, fold: int) -> ModelState:
        if fold in self.checkpoints:
            state, _ = load_checkpoint(self.checkpoints[fold])
        else:
            state = self.train_fold(self.cfg, self.manifest, fold, self.output_dir / "runs" / f"fold_{fold}").best_state
        if state.cfg.variant is not ModelVariant.WITH_CLASS:
            raise ConfigError(f"Class corruption needs a with_class model, fold {fold} has {state.cfg.variant.value}")
        return state

    def run(self) -> None:
        for fold in self.folds:
            state = self.state_for(fold)
            for label, override in PROVISION_LEVELS.items():
                logger.info("Fold %d, class provision %s", fold, label)
                self.record(state, self.manifest, fold, {"provision": label}, class_override=override)


def main():
    cfg = RunConfig()
    experiment = ClassCorruptionExperiment(cfg, load_manifest(cfg.data.manifest))
    experiment.run_all_experiments()
    print("\nClass corruption study completed!")


if __name__ == "__main__":
    main()
