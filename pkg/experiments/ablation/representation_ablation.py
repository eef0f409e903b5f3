#!/usr/bin/env python3
"""
Rotation Representation Ablation

Trains one model per rotation representation (Euler sin/cos, quaternion,
6D_xy, 6D_xz) on every requested fold and scores the test fold twice:
as regressed, and after plane coupling. Translation errors are identical in
both rows because coupling never moves a plane center.
"""

import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

sys.path.append(str(Path(__file__).resolve().parents[2]))

from experiments.common import StudyExperiment
from src.config import RunConfig
from src.phantom_data import DatasetManifest, load_manifest
from src.rotation_codecs import RepresentationKind

logger = logging.getLogger(__name__)


class RepresentationAblationExperiment(StudyExperiment):
    title = "Rotation Representation Ablation"
    group_cols = ("representation", "region", "stage")

    def __init__(
        self,
        cfg: RunConfig,
        manifest: DatasetManifest,
        output_dir: str = "experiments/ablation/results",
        folds: Optional[Sequence[int]] = None,
        representations: Optional[Sequence[RepresentationKind]] = None,
    ):
        super().__init__(cfg, manifest, output_dir, folds)
        self.representations = [RepresentationKind(r) for r in (representations or list(RepresentationKind))]

    def run(self) -> None:
        for kind in self.representations:
            cfg = replace(self.cfg, model=replace(self.cfg.model, representation=kind))
            for fold in self.folds:
                logger.info("Representation %s, fold %d", kind.value, fold)
                run_dir = self.output_dir / "runs" / kind.value / f"fold_{fold}"
                result = self.train_fold(cfg, self.manifest, fold, run_dir)
                self.record(result.best_state, self.manifest, fold, {"representation": kind.value})


def main():
    cfg = RunConfig()
    experiment = RepresentationAblationExperiment(cfg, load_manifest(cfg.data.manifest))
    experiment.run_all_experiments()
    print("\nRepresentation ablation completed!")


if __name__ == "__main__":
    main()
