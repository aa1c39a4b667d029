"""Coverage-curve rendering to vector graphics."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .runner import MANIFOLD_ALGORITHMS, MetricsRecord, read_metrics  # noqa: E402


def _run_label(csv_path: Path) -> str:
    manifest = csv_path.parent / "manifest.json"
    if manifest.exists():
        try:
            return json.loads(manifest.read_text())["algorithm"]
        except (KeyError, json.JSONDecodeError):
            pass
    return csv_path.parent.parent.name


def _refit_totals(records: Sequence[MetricsRecord]) -> list[int]:
    """Rollout counts at the end of each loop (where the manifold refits)."""
    totals = []
    for i, r in enumerate(records):
        last_of_loop = i + 1 == len(records) or records[i + 1].loop != r.loop
        if last_of_loop:
            totals.append(r.total_rollouts)
    return totals


def emit_plot(csv_paths: Sequence, out_path) -> None:
    """Median coverage lines with interquartile bands, one group per algorithm.

    Markers on manifold-based curves show where the latent representation was
    refit. Single-run groups get a plain line, no band.
    """
    paths = [Path(p) for p in csv_paths]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"metrics file not found: {p}")
    groups: dict[str, list[list[MetricsRecord]]] = {}
    for p in paths:
        groups.setdefault(_run_label(p), []).append(read_metrics(p))

    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for label in sorted(groups):
        runs = groups[label]
        grid = [r.total_rollouts for r in runs[0]]
        curves = np.asarray([[r.coverage for r in records] for records in runs])
        med = np.median(curves, axis=0)
        line, = ax.plot(grid, med, label=label, linewidth=1.6)
        if len(runs) > 1:
            q25 = np.percentile(curves, 25, axis=0)
            q75 = np.percentile(curves, 75, axis=0)
            ax.fill_between(grid, q25, q75, alpha=0.2, color=line.get_color())
        if label in MANIFOLD_ALGORITHMS:
            marks = set(_refit_totals(runs[0]))
            xs = [g for g in grid if g in marks]
            ys = [m for g, m in zip(grid, med) if g in marks]
            ax.plot(xs, ys, linestyle="none", marker="o", markersize=4,
                    color=line.get_color())
    ax.set_xlabel("episode rollouts (cumulative)")
    ax.set_ylabel("behaviour coverage (fraction of cells)")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.25)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
