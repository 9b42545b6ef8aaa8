"""SVG line plots of per-entry LTE50 curves against observed samples."""

from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import SeasonSeries  # noqa: E402
from .models import ModelParams  # noqa: E402
from .tal import TaskSet, entry_outputs  # noqa: E402

logger = logging.getLogger(__name__)


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_") or "set"


def build_figure(model: ModelParams, task_set: TaskSet, season: SeasonSeries, title: str = ""):
    """Figure with one LTE50 curve per entry, then the sampled LTE50 as the last line."""
    curves = entry_outputs(model, task_set, [season.weather])
    days = np.arange(season.length)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for entry, out in zip(task_set.entries, curves):
        style = {"color": "tab:green", "alpha": 0.5, "lw": 0.8} if entry.kind in ("cr", "lr") else {"lw": 1.2}
        ax.plot(days, out[0][:, 1], label=entry.label if entry.kind not in ("cr", "lr") else None, **style)
    sampled = np.flatnonzero(season.lte_mask)
    ax.plot(sampled, season.lte[sampled, 1], "o", color="black", ms=4, label="observed LTE50", zorder=5)
    ax.set_xlabel(f"day of season (day 0 = {season.start.isoformat()})")
    ax.set_ylabel("LTE50 (°C)")
    ax.set_title(title or f"{season.task_id} {season.season_label}")
    if len(task_set) <= 20:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return fig


def plot_task_set(model: ModelParams, task_set: TaskSet, season: SeasonSeries, path: str | Path, title: str = "") -> Path:
    fig = build_figure(model, task_set, season, title)
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def emit_plots(
    model: ModelParams, task_sets: Mapping[str, TaskSet], season: SeasonSeries, out: str | Path
) -> list[Path]:
    """One SVG per task-set type, written under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, ts in task_sets.items():
        p = plot_task_set(model, ts, season, out / f"lte50_{_slug(name)}.svg", f"{name}: {season.task_id} {season.season_label}")
        logger.info("wrote %s", p)
        paths.append(p)
    return paths
