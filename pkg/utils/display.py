"""
Display utilities for plane regression runs.
Provides the shared rich console, logging setup and result tables.
"""

import logging
from collections import Counter
from typing import Sequence

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

console = Console()

METRIC_HEADERS = {"d": "d (mm)", "eps_n": "ε_n (°)", "eps_i": "ε_i (°)", "score": "Score"}


def setup_logging(verbose: bool = False) -> None:
    """Route library logging through rich; INFO by default, DEBUG when verbose."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=verbose)],
        force=True,
    )


class RunDisplay:
    """Rich output for datasets, training runs and evaluation summaries."""

    @staticmethod
    def display_header(title: str, subtitle: str = "", style: str = "blue"):
        body = f"[bold {style}]{title}[/bold {style}]"
        if subtitle:
            body += f"\n[white]{subtitle}[/white]"
        console.print(Panel.fit(body, border_style=style))

    @staticmethod
    def display_manifest(manifest, title: str = "Dataset"):
        """Volumes per region and fold."""
        counts = Counter((e.region.value, e.fold) for e in manifest.entries)
        regions = sorted({r for r, _ in counts})
        table = Table(title=f"📦 {title}", show_header=True, header_style="bold cyan")
        table.add_column("Region", style="cyan")
        for fold in range(manifest.n_folds):
            table.add_column(f"Fold {fold}", style="white", justify="right")
        table.add_column("Total", style="yellow", justify="right")
        for region in regions:
            per_fold = [counts.get((region, f), 0) for f in range(manifest.n_folds)]
            table.add_row(region, *(str(c) for c in per_fold), str(sum(per_fold)))
        patients = len({e.patient_id for e in manifest.entries})
        table.caption = f"{len(manifest.entries)} volumes from {patients} patients"
        console.print(table)

    @staticmethod
    def display_history(history: Sequence, title: str = "Training"):
        table = Table(title=f"📈 {title}", show_header=True, header_style="bold green")
        table.add_column("Epoch", style="cyan", justify="right")
        table.add_column("Loss", style="white", justify="right")
        table.add_column("LR", style="magenta", justify="right")
        table.add_column("Val score", style="yellow", justify="right")
        for record in history:
            val = "-" if record.val_score is None else f"{record.val_score:.3f}"
            table.add_row(str(record.epoch), f"{record.loss:.5f}", f"{record.lr:.2e}", val)
        console.print(table)

    @staticmethod
    def display_hyperparams(rows: Sequence[dict], title: str = "Hyper-parameter draws"):
        table = Table(title=f"🎲 {title}", show_header=True, header_style="bold magenta")
        if not rows:
            console.print("[yellow]No draws[/yellow]")
            return
        for key in rows[0]:
            table.add_column(key, justify="right")
        for row in rows:
            table.add_row(*(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row.values()))
        console.print(table)

    @staticmethod
    def display_summary(summary: pd.DataFrame, title: str = "Evaluation", group_cols: Sequence[str] = ("region", "stage")):
        """Results table: d, ε_n, ε_i and score as mean ± std per group."""
        table = Table(title=f"📊 {title}", show_header=True, header_style="bold cyan")
        for col in group_cols:
            table.add_column(col.replace("_", " ").title(), style="cyan")
        for header in METRIC_HEADERS.values():
            table.add_column(header, style="white", justify="right")
        for keys, group in summary.groupby(list(group_cols), sort=False):
            keys = keys if isinstance(keys, tuple) else (keys,)
            cells = []
            for metric in METRIC_HEADERS:
                row = group[group["metric"] == metric]
                cells.append("-" if row.empty else f"{row['mean'].iloc[0]:.2f} ± {row['std'].iloc[0]:.2f}")
            table.add_row(*(str(k) for k in keys), *cells)
        console.print(table)

    @staticmethod
    def display_planes(planes, title: str = "Regressed planes"):
        table = Table(title=f"🧭 {title} ({planes.region.value})", show_header=True, header_style="bold green")
        table.add_column("Plane", style="cyan")
        table.add_column("Center (mm)", style="white")
        table.add_column("e_u", style="yellow")
        table.add_column("e_v", style="yellow")
        table.add_column("e_w", style="magenta")

        def fmt(v) -> str:
            return "(" + ", ".join(f"{x:+.3f}" for x in v) + ")"

        for name, plane in planes.planes().items():
            table.add_row(name, fmt(plane.center), fmt(plane.e_u), fmt(plane.e_v), fmt(plane.e_w))
        console.print(table)
