#!/usr/bin/env python3
"""
Training Set Size Sweep

Repeats training with 100 %, 80 %, 60 % and 40 % of the training volumes
(whole patients are dropped) while the validation and test folds stay
untouched, then scores each fold's test volumes.
"""

import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

sys.path.append(str(Path(__file__).resolve().parents[2]))

from experiments.common import StudyExperiment
from src.config import RunConfig
from src.errors import DataError
from src.phantom_data import STANDARD_FRACTIONS, DatasetManifest, fold_roles, load_manifest, reduce_training_set

logger = logging.getLogger(__name__)


class TrainingFractionExperiment(StudyExperiment):
    title = "Training Set Size Sweep"
    group_cols = ("fraction", "region", "stage")

    def __init__(
        self,
        cfg: RunConfig,
        manifest: DatasetManifest,
        output_dir: str = "experiments/data_sweep/results",
        folds: Optional[Sequence[int]] = None,
        fractions: Sequence[float] = STANDARD_FRACTIONS,
    ):
        super().__init__(cfg, manifest, output_dir, folds)
        self.fractions = list(fractions)
        self.training_sizes: List[dict] = []

    def run(self) -> None:
        for fold in self.folds:
            held_out = fold_roles(fold, self.manifest.n_folds)
            reference: Dict[str, list] = {}
            for fraction in self.fractions:
                reduced = reduce_training_set(self.manifest, fraction, test_fold=fold, seed=self.cfg.seed)
                audit = {
                    role: sorted(e.volume for e in reduced.in_folds(held_out[role])) for role in ("test", "validation")
                }
                if reference and audit != reference:
                    raise DataError(f"Held-out folds changed when reducing to {fraction:.0%} on fold {fold}")
                reference = reference or audit
                n_train = len(reduced.in_folds(held_out["train"]))
                self.training_sizes.append({"fold": fold, "fraction": fraction, "n_train": n_train})
                logger.info("Fraction %.0f%%, fold %d: %d training volumes", 100 * fraction, fold, n_train)
                run_dir = self.output_dir / "runs" / f"fraction_{fraction:.2f}" / f"fold_{fold}"
                result = self.train_fold(self.cfg, reduced, fold, run_dir)
                self.record(result.best_state, reduced, fold, {"fraction": f"{fraction:.2f}"})

    def save_results(self):
        summary = super().save_results()
        report = self.output_dir / "report.md"
        lines = ["", "## Training set sizes", "", "| Fold | Fraction | Training volumes |", "|---|---|---|"]
        lines += [f"| {s['fold']} | {s['fraction']:.2f} | {s['n_train']} |" for s in self.training_sizes]
        report.write_text(report.read_text() + "\n".join(lines) + "\n")
        return summary


def main():
    cfg = RunConfig()
    experiment = TrainingFractionExperiment(cfg, load_manifest(cfg.data.manifest))
    experiment.run_all_experiments()
    print("\nTraining set size sweep completed!")


if __name__ == "__main__":
    main()
