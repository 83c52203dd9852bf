"""Metric tables (CSV/JSON) and report figures.

One CSV row per method and evaluated stage, columns matching the mIoU
report layout: single-task scores, then the cross-task unions. The report
path also renders matplotlib figures (loss traces per stage, grouped mIoU
bars) next to the delimited output.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import METRIC_COLUMNS, IoUReport  # noqa: E402

CSV_HEADER = ("method", "stages", *METRIC_COLUMNS)


def metric_row(method: str, stages: str, report: IoUReport) -> dict[str, str]:
    row = {"method": method, "stages": stages}
    for col in METRIC_COLUMNS:
        val = report.by_subset.get(col)
        row[col] = "" if val is None else repr(val)
    return row


def write_metrics_csv(path, rows: list[dict[str, str]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in CSV_HEADER})


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return [dict(row) for row in csv.DictReader(f)]


def write_report_json(path, method: str, stages: str, report: IoUReport) -> None:
    payload = {
        "method": method,
        "stages": stages,
        "miou": {k: report.by_subset.get(k) for k in report.by_subset},
        "per_class_iou": {str(c): v for c, v in report.per_class.items()},
        "pixel_counts": report.pixel_counts,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# -- figures ----------------------------------------------------------------


def plot_loss_curves(train_reports: list[dict], out_path) -> None:
    """One panel of per-epoch loss traces, a line per method/stage."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rep in train_reports:
        label = f"{rep['method']} {rep['stage_tag']}"
        ax.plot(range(1, len(rep["epoch_losses"]) + 1), rep["epoch_losses"],
                label=label, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def plot_miou_bars(rows: list[dict[str, str]], out_path) -> None:
    """Grouped bars: one group per metric column, one bar per method row."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    cols = [c for c in METRIC_COLUMNS if any(r.get(c) for r in rows)]
    width = 0.8 / max(1, len(rows))
    for j, row in enumerate(rows):
        xs, ys = [], []
        for i, col in enumerate(cols):
            if row.get(col):
                xs.append(i + j * width)
                ys.append(float(row[col]))
        ax.bar(xs, ys, width=width, label=f"{row['method']} ({row['stages']})")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(cols))])
    ax.set_xticklabels(cols)
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def render_run_report(run_dir, out_dir=None) -> list[Path]:
    """Collect a run directory's metrics and training traces into CSV + figures."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[dict[str, str]] = []
    train_reports: list[dict] = []
    for method_dir in sorted(p for p in run_dir.iterdir() if p.is_dir()):
        metrics = method_dir / "metrics.csv"
        if metrics.exists():
            rows.extend(read_metrics_csv(metrics))
        for rep_path in sorted(method_dir.glob("train_*.json")):
            train_reports.append(json.loads(rep_path.read_text()))
    if not rows:
        raise FileNotFoundError(f"no metrics.csv found under {run_dir}")

    written = []
    combined = out_dir / "combined_metrics.csv"
    write_metrics_csv(combined, rows)
    written.append(combined)
    if train_reports:
        loss_fig = out_dir / "fig_loss_curves.png"
        plot_loss_curves(train_reports, loss_fig)
        written.append(loss_fig)
    bars_fig = out_dir / "fig_miou.png"
    final_rows = [r for r in rows if r.get("task1u2u3") or r.get("stages") == "ss"]
    plot_miou_bars(final_rows or rows, bars_fig)
    written.append(bars_fig)
    return written
