"""Aggregate tables and IoU-over-time curves from run directories.

Expected layout (as written by ``crossval``)::

    <run_dir>/<cell>/cell.json
    <run_dir>/<cell>/fold<k>/runlog.csv

Reading is side-effect free; outputs go to a separate directory.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import BINARY_KEYS, SEMANTIC_KEYS, aggregate_folds, format_mean_std
from .training import RunLog


class ReportError(ValueError):
    pass


@dataclass
class CellLogs:
    name: str
    meta: dict
    folds: dict[int, RunLog] = field(default_factory=dict)

    @property
    def family(self) -> str:
        return self.meta.get("family", self.name.split("-")[0])

    @property
    def iou_key(self) -> str:
        keys = next(iter(self.folds.values())).metric_keys
        return "iou" if "iou" in keys else "mean_iou"

    @property
    def metric_keys(self) -> tuple[str, ...]:
        return BINARY_KEYS if self.iou_key == "iou" else SEMANTIC_KEYS

    @property
    def common_epochs(self) -> int:
        return min(len(log.records) for log in self.folds.values())

    @property
    def truncated(self) -> bool:
        lengths = {len(log.records) for log in self.folds.values()}
        expected = self.meta.get("n_epochs")
        return len(lengths) > 1 or (expected is not None and max(lengths) < expected)


def discover_cells(run_dir) -> list[CellLogs]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"{run_dir} is not a directory")
    cells: dict[Path, CellLogs] = {}
    for log_path in sorted(run_dir.glob("**/fold*/runlog.csv")):
        cell_dir = log_path.parent.parent
        if cell_dir not in cells:
            meta_path = cell_dir / "cell.json"
            meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
            cells[cell_dir] = CellLogs(meta.get("cell", cell_dir.name), meta)
        log = RunLog.read_csv(log_path)
        if log.records:
            cells[cell_dir].folds[int(log_path.parent.name[4:])] = log
    out = [c for c in cells.values() if c.folds]
    if not out:
        raise ReportError(f"no run logs found under {run_dir}")
    return out


def cell_row(cell: CellLogs) -> dict:
    """Metrics at the last common epoch, mean and population std across folds."""
    e = cell.common_epochs - 1
    per_fold = [{k: log.records[e].metrics[k] for k in cell.metric_keys} for _, log in sorted(cell.folds.items())]
    agg = aggregate_folds(per_fold)
    row = {"cell": cell.name, "family": cell.family, "n_folds": len(per_fold), "epoch": e + 1}
    for k in cell.metric_keys:
        row[k] = format_mean_std(*agg[k])
    for k in cell.metric_keys:
        row[f"{k}_mean"] = agg[k][0]
        row[f"{k}_std"] = agg[k][1]
    return row


def fold_mean_curve(cell: CellLogs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(epochs, mean cumulative seconds, mean test IoU) up to the last common epoch."""
    n = cell.common_epochs
    logs = [log for _, log in sorted(cell.folds.items())]
    secs = np.array([[r.cumulative_seconds for r in log.records[:n]] for log in logs])
    iou = np.array([[r.metrics[cell.iou_key] for r in log.records[:n]] for log in logs])
    return np.arange(1, n + 1), secs.mean(axis=0), iou.mean(axis=0)


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def plot_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]], path: Path, title: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (secs, iou) in curves.items():
        ax.plot(secs, iou, marker="o", markersize=2, label=label)
    ax.set_xscale("log")
    ax.set_xlabel("cumulative training time (s)")
    ax.set_ylabel("test IoU (fold mean)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


@dataclass
class ReportOutput:
    table: Path
    curves_csv: Path
    figures: list[Path]
    notes: list[str]


def build_report(run_dir, out_dir) -> ReportOutput:
    cells = discover_cells(run_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    notes = []
    rows = []
    curve_rows = []
    groups: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
    for cell in cells:
        if cell.truncated:
            notes.append(f"{cell.name}: partial logs, curves truncated at epoch {cell.common_epochs}")
        rows.append(cell_row(cell))
        epochs, secs, iou = fold_mean_curve(cell)
        for e, s, v in zip(epochs, secs, iou):
            curve_rows.append({"cell": cell.name, "family": cell.family, "epoch": int(e),
                               "mean_seconds": float(s), "mean_iou": float(v)})
        # one figure per (size, data setting); one curve per family
        setting = cell.name.split("-", 1)[1] if "-" in cell.name else "all"
        groups.setdefault(setting, {})[cell.family] = (secs, iou)

    table = out / "aggregate.csv"
    _write_csv(table, rows)
    curves_csv = out / "curves.csv"
    _write_csv(curves_csv, curve_rows)
    figures = [plot_curves(c, out / f"iou_vs_time_{s}.png", s) for s, c in sorted(groups.items())]
    if notes:
        (out / "NOTES.txt").write_text("\n".join(notes) + "\n")
    return ReportOutput(table, curves_csv, figures, notes)
