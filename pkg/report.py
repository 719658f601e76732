"""
Report rendering: SVG line charts of sweep and training CSVs, a plain-text
summary of the best cells, and the PCA scatter of pooled features.

Charts are deterministic: Agg backend, fixed SVG hash salt and no date
metadata, so identical inputs give byte-identical files.
"""
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from sklearn.decomposition import PCA  # noqa: E402

import storage  # noqa: E402
from errors import DataIOError, ReportError  # noqa: E402
from trainer import METRIC_COLUMNS  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "w2r2-report"
SVG_METADATA = {"Date": None}

# metric -> higher is better
REPORT_METRICS = {
    "acc25_fused": True,
    "acc50_fused": True,
    "sel_acc_fused": True,
    "sel_acc_shortcut": False,
    "soft_iou_shortcut": False,
    "separation_index": True,
}
POPULATION_COLORS = {"2d": "tab:orange", "3d": "tab:blue", "fused": "tab:green"}

Series = Dict[float, Tuple[List[float], List[float]]]


def load_sweep(path: str) -> pd.DataFrame:
    """Successful cells of a sweep CSV; an empty or fully failed sweep is an error."""
    frame = storage.read_csv(path, required=["lambda", "mu", "status"] + METRIC_COLUMNS,
                             numeric=["lambda", "mu"] + METRIC_COLUMNS)
    if frame.empty:
        raise ReportError(f"{path}: sweep has no cells")
    ok = frame[frame["status"] == "ok"].reset_index(drop=True)
    if ok.empty:
        raise ReportError(f"{path}: no sweep cell succeeded")
    return ok


def load_history(path: str) -> pd.DataFrame:
    frame = storage.read_csv(path, required=METRIC_COLUMNS, numeric=METRIC_COLUMNS)
    if frame.empty:
        raise ReportError(f"{path}: metrics history has no rows")
    return frame


def series(frame: pd.DataFrame, x: str, group: str, metric: str) -> Series:
    """One (xs, ys) line per value of `group`, sorted by x."""
    out: Series = {}
    for key, part in frame.sort_values([group, x]).groupby(group, sort=True):
        out[float(key)] = (part[x].astype(float).tolist(), part[metric].astype(float).tolist())
    return out


def _save(fig, path: str) -> str:
    try:
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}")
    finally:
        plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def _metric_grid():
    fig, axes = plt.subplots(2, 3, figsize=(12, 7))
    return fig, axes.reshape(-1)


def plot_sweep(frame: pd.DataFrame, x: str, group: str, path: str) -> str:
    """Each report metric against `x` ("lambda" or "mu"), one line per `group` value."""
    group_label = "λ" if group == "lambda" else "μ"
    fig, axes = _metric_grid()
    for ax, metric in zip(axes, REPORT_METRICS):
        for key, (xs, ys) in series(frame, x, group, metric).items():
            ax.plot(xs, ys, marker="o", label=f"{group_label}={key:g}")
        ax.set_title(metric)
        ax.set_xlabel("λ" if x == "lambda" else "μ")
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_history(histories: Dict[str, pd.DataFrame], path: str) -> str:
    fig, axes = _metric_grid()
    for ax, metric in zip(axes, REPORT_METRICS):
        for label, frame in histories.items():
            ax.plot(frame["step"].tolist(), frame[metric].tolist(), marker=".", label=label)
        ax.set_title(metric)
        ax.set_xlabel("step")
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def best_cells(frame: pd.DataFrame) -> List[str]:
    lines = []
    for metric, higher in REPORT_METRICS.items():
        values = frame[metric]
        if values.isna().all():
            lines.append(f"{metric}: undefined in every cell")
            continue
        idx = values.idxmax() if higher else values.idxmin()
        row = frame.loc[idx]
        lines.append(f"{metric} ({'max' if higher else 'min'}): {row[metric]:.4f} "
                     f"at lambda={row['lambda']:g}, mu={row['mu']:g}")
    return lines


def _history_labels(paths: Sequence[str]) -> List[str]:
    labels = []
    for path in paths:
        label = os.path.basename(os.path.dirname(os.path.abspath(path))) or os.path.basename(path)
        if label in labels:
            label = f"{label} ({len(labels)})"
        labels.append(label)
    return labels


def emit_report(sweep_csv: Optional[str], history_csvs: Sequence[str], out_dir: str) -> List[str]:
    """Render charts and summary.txt into out_dir; returns the written paths."""
    if sweep_csv is None and not history_csvs:
        raise ReportError("nothing to report: give a sweep CSV or at least one metrics CSV")
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    summary = []

    if sweep_csv is not None:
        frame = load_sweep(sweep_csv)
        outputs.append(plot_sweep(frame, "lambda", "mu", os.path.join(out_dir, "sweep_lambda.svg")))
        outputs.append(plot_sweep(frame, "mu", "lambda", os.path.join(out_dir, "sweep_mu.svg")))
        summary.append(f"Sweep: {len(frame)} successful cells from {sweep_csv}")
        summary.extend(f"  {line}" for line in best_cells(frame))

    if history_csvs:
        histories = {label: load_history(p) for label, p in zip(_history_labels(history_csvs), history_csvs)}
        outputs.append(plot_history(histories, os.path.join(out_dir, "history.svg")))
        for label, frame in histories.items():
            last = frame.iloc[-1]
            summary.append(f"Run {label}: step {int(last['step'])} sel_acc_fused={last['sel_acc_fused']:.4f} "
                           f"sel_acc_shortcut={last['sel_acc_shortcut']:.4f} "
                           f"soft_iou_shortcut={last['soft_iou_shortcut']:.4f}")

    summary_path = os.path.join(out_dir, "summary.txt")
    try:
        with open(summary_path, "w") as f:
            f.write("\n".join(summary) + "\n")
    except OSError as e:
        raise DataIOError(f"cannot write {summary_path}: {e}")
    outputs.append(summary_path)
    return outputs


def plot_feature_scatter(features: Dict[str, np.ndarray], path: str,
                         title: str = "Pooled features (PCA)") -> str:
    """2-component PCA of the 2D, 3D and fused populations, with centroids marked."""
    widths = {v.shape[1] for v in features.values()}
    if len(widths) != 1:
        raise ReportError(f"feature populations differ in width: {sorted(widths)}")
    stacked = np.concatenate(list(features.values()), axis=0)
    if stacked.shape[0] < 2 or stacked.shape[1] < 2:
        raise ReportError(f"PCA needs at least 2 rows and 2 columns, got {stacked.shape}")

    projected = PCA(n_components=2, svd_solver="full").fit_transform(stacked)
    fig, ax = plt.subplots(figsize=(7, 6))
    start = 0
    for name, values in features.items():
        part = projected[start:start + len(values)]
        start += len(values)
        color = POPULATION_COLORS.get(name)
        ax.scatter(part[:, 0], part[:, 1], s=6, alpha=0.4, color=color, label=name)
        centroid = part.mean(axis=0)
        ax.scatter([centroid[0]], [centroid[1]], s=120, marker="X", color=color, edgecolors="black")
    ax.set_title(title)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
