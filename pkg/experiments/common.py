"""
Shared plumbing for the study experiments: train one fold, score its test
volumes, and collect per-volume records plus fold-aggregated summaries.
"""

import logging
from collections import defaultdict
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from src.augmentation import inference_intensity
from src.config import RunConfig
from src.evaluation import ScoreReport, evaluate_state, summary_frame, write_report
from src.phantom_data import N_FOLDS, DatasetManifest, fold_roles
from src.regression_model import ModelState
from src.training import TrainResult, TrainRun, train

logger = logging.getLogger(__name__)


class StudyExperiment:
    """Base class; subclasses implement run() and fill self.results via record()."""

    title = "Study"
    group_cols: Tuple[str, ...] = ("region", "stage")

    def __init__(
        self,
        cfg: RunConfig,
        manifest: DatasetManifest,
        output_dir: str,
        folds: Optional[Sequence[int]] = None,
    ):
        self.cfg = cfg
        self.manifest = manifest
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.folds = list(range(N_FOLDS)) if folds is None else list(folds)
        self.ip = inference_intensity(cfg.intensity)
        self.records: List[dict] = []
        # labels -> stage -> per-volume reports over all folds
        self.results: Dict[Tuple[Tuple[str, str], ...], Dict[str, List[ScoreReport]]] = defaultdict(lambda: defaultdict(list))

    def train_fold(self, cfg: RunConfig, manifest: DatasetManifest, fold: int, run_dir: Path) -> TrainResult:
        run = TrainRun.from_config(replace(cfg, data=replace(cfg.data, fold=fold)), manifest, run_dir)
        return train(run)

    def record(
        self,
        state: ModelState,
        manifest: DatasetManifest,
        fold: int,
        labels: Dict[str, str],
        class_override: Optional[float] = None,
    ) -> Dict[str, List[ScoreReport]]:
        """Score the test fold of `fold` and file the reports under `labels`."""
        test_folds = fold_roles(fold, manifest.n_folds)["test"]
        results = evaluate_state(state, manifest, test_folds, self.ip, class_override, self.cfg.train.batch_size)
        key = tuple(labels.items())
        for stage, reports in results.items():
            self.results[key][stage].extend(reports)
            self.records.extend({**labels, "stage": stage, **r.as_record()} for r in reports)
        return results

    def run(self) -> None:
        raise NotImplementedError

    def summary(self) -> pd.DataFrame:
        frames = [summary_frame(stages, **dict(key)) for key, stages in self.results.items()]
        return pd.concat(frames, ignore_index=True)

    def save_results(self) -> pd.DataFrame:
        summary = self.summary()
        write_report(self.output_dir, self.title, self.records, summary, self.group_cols, self.cfg.to_dict())
        return summary

    def run_all_experiments(self) -> pd.DataFrame:
        logger.info("Starting %s on folds %s", self.title, self.folds)
        self.run()
        return self.save_results()
