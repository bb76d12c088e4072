"""Run reports: delimited output, JSON summaries, and rendered figures.

CSV rows are written with full-precision repr floats so identical runs
produce identical bytes; wall_s (the only non-deterministic field) is the
final column and `strip_wall_clock` removes it for byte comparisons.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .trainloop import CheckpointRow, RunReport  # noqa: E402

CSV_COLUMNS = (
    "experiment",
    "seed",
    "env_step",
    "success_rate",
    "stage_mean",
    "policy_loss",
    "planner_loss",
    "wall_s",
)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def row_to_csv(report: RunReport, row: CheckpointRow) -> str:
    values = (
        report.experiment,
        report.seed,
        row.env_step,
        row.success_rate,
        row.stage_mean,
        row.policy_loss,
        row.planner_loss,
        row.wall_s,
    )
    return ",".join(_fmt(v) for v in values)


class CsvWriter:
    """Crash-safe incremental CSV writer: each row is flushed to disk."""

    def __init__(self, path, report: RunReport):
        self.path = Path(path)
        self.report = report
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.write(",".join(CSV_COLUMNS) + "\n")
        self._fh.flush()

    def write_row(self, row: CheckpointRow) -> None:
        self._fh.write(row_to_csv(self.report, row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_csv(path, report: RunReport) -> None:
    writer = CsvWriter(path, report)
    for row in report.rows:
        writer.write_row(row)
    writer.close()


def read_csv(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, line.split(","))) for line in lines[1:]]


def strip_wall_clock(csv_text: str) -> str:
    """Drop the trailing wall_s column from every row."""
    out = []
    for line in csv_text.strip().splitlines():
        out.append(",".join(line.split(",")[:-1]))
    return "\n".join(out) + "\n"


def aggregate(reports) -> dict:
    """Mean and std of success per env step across same-shaped runs."""
    steps = [r.env_step for r in reports[0].rows]
    table = np.array([[row.success_rate for row in rep.rows] for rep in reports])
    stages = np.array([[row.stage_mean for row in rep.rows] for rep in reports])
    return {
        "experiment": reports[0].experiment,
        "task": reports[0].task,
        "seeds": [r.seed for r in reports],
        "env_steps": steps,
        "success_mean": table.mean(axis=0).tolist(),
        "success_std": table.std(axis=0).tolist(),
        "stage_mean": stages.mean(axis=0).tolist(),
        "stage_std": stages.std(axis=0).tolist(),
        "final_success_mean": float(table[:, -1].mean()),
        "final_success_std": float(table[:, -1].std()),
        "base_success_mean": float(table[:, 0].mean()),
    }


def write_summary_json(path, grouped_reports: dict) -> None:
    """Aggregate {name: [RunReport, ...]} into one JSON summary file."""
    summary = {name: aggregate(reports) for name, reports in grouped_reports.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def render_success_figure(path, grouped_reports: dict, title: str = "") -> None:
    """Success-rate curves (mean with a +-1 std band) for each run group."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name, reports in sorted(grouped_reports.items()):
        agg = aggregate(reports)
        steps = np.asarray(agg["env_steps"])
        mean = np.asarray(agg["success_mean"])
        std = np.asarray(agg["success_std"])
        if len(steps) == 1:
            ax.axhline(mean[0], linestyle="--", alpha=0.8, label=f"{name} (offline)")
            continue
        ax.plot(steps, mean, label=name)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_bar_figure(path, labels_values: dict, ylabel: str, title: str = "") -> None:
    """Simple labeled bar chart for final/summary comparisons."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    names = list(labels_values)
    vals = [labels_values[n] for n in names]
    ax.bar(range(len(names)), vals, color="#4878b0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)
