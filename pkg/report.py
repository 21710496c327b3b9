#!/usr/bin/env python3
"""
Report Writer

CSV tables and SVG charts for harness results. Writing is idempotent:
rows of an existing table are replaced by run id (or timing key), other
rows are kept, and the table is re-sorted so the file content depends only
on the set of rows.

Files in the output directory:
    runs.csv              one row per RunReport (deterministic metrics only)
    timings.csv           wall times of runs and scaling phases
    alpha_trajectory.csv  per-epoch architecture weights of darts runs
    selections.csv        how often each pair was selected per (method, v1)
    scaling_fits.csv      power-law fits of the scaling study
    scaling_auc.csv       test AUC against the number of candidates
    *.svg                 charts of the above
"""

from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence
import logging
import threading

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams.update({"svg.hashsalt": "msnas", "axes.unicode_minus": False})
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from harness import RunReport, ScalingResult, TimingRecord  # noqa: E402
from pipeline import softmax  # noqa: E402

logger = logging.getLogger(__name__)

RUNS_FILE = "runs.csv"
TIMINGS_FILE = "timings.csv"
ALPHA_FILE = "alpha_trajectory.csv"
SELECTIONS_FILE = "selections.csv"
FITS_FILE = "scaling_fits.csv"
SCALING_AUC_FILE = "scaling_auc.csv"

RUN_COLUMNS = list(RunReport.CSV_COLUMNS)
TIMING_COLUMNS = list(TimingRecord.CSV_COLUMNS)
TIMING_KEY = ["run_id", "method", "n_models", "n_events", "repeat"]
ALPHA_COLUMNS = ["run_id", "seed", "v1", "epoch", "task", "candidate", "alpha", "softmax"]
TEXT_COLUMNS = {"run_id": str, "method": str, "model_t1": str, "model_t2": str, "status": str,
                "candidate": str}
SEARCH_METHODS = ("darts", "spos")
GRID_METHODS = ("grid", "reopt")
V1_METHODS = ("darts", "spos", "grid-best", "reopt-sweep", "no-reopt-sweep")

# One writer at a time per process
_write_lock = threading.Lock()


def read_table(path: Path) -> Optional[pd.DataFrame]:
    if not path.exists():
        return None
    try:
        return pd.read_csv(path, dtype=TEXT_COLUMNS, keep_default_na=False, na_values=["nan"],
                           float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise OSError(f"Could not read {path}: {e}") from e


def _write_table(path: Path, frame: pd.DataFrame):
    try:
        frame.to_csv(path, index=False, na_rep="nan")
    except OSError as e:
        raise OSError(f"Could not write {path}: {e}") from e


def merge_table(path: Path, frame: pd.DataFrame, key: Sequence[str], order: Sequence[str]) -> pd.DataFrame:
    """Replace rows of an existing CSV that share a key with the new rows, then sort."""
    old = read_table(path)
    if old is not None and len(old):
        fresh = set(frame[list(key)].astype(str).itertuples(index=False, name=None))
        keep = [tuple(row) not in fresh for row in old[list(key)].astype(str).itertuples(index=False, name=None)]
        frame = pd.concat([old[keep], frame], ignore_index=True)
    frame = frame.sort_values(list(order), kind="mergesort").reset_index(drop=True)
    _write_table(path, frame)
    return frame


def runs_frame(reports: Iterable[RunReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in reports], columns=RUN_COLUMNS)


def timings_frame(records: Iterable[TimingRecord]) -> pd.DataFrame:
    return pd.DataFrame([t.to_row() for t in records], columns=TIMING_COLUMNS)


def run_timings(reports: Iterable[RunReport]) -> List[TimingRecord]:
    return [TimingRecord(r.method, r.n_models, r.n_events, r.wall_seconds, run_id=r.run_id)
            for r in reports if r.wall_seconds > 0]


def alpha_frame(reports: Iterable[RunReport]) -> pd.DataFrame:
    """Long format: one row per (run, epoch, task, candidate)."""
    rows = []
    for r in reports:
        if not r.alpha_trajectory or not r.candidates:
            continue
        for epoch, alphas in enumerate(r.alpha_trajectory, start=1):
            for task in (1, 2):
                values = np.asarray(alphas[task], dtype=np.float64)
                weights = softmax(values)
                for name, alpha, weight in zip(r.candidates[task], values, weights):
                    rows.append({"run_id": r.run_id, "seed": r.seed, "v1": r.v1, "epoch": epoch,
                                 "task": task, "candidate": name, "alpha": float(alpha),
                                 "softmax": float(weight)})
    return pd.DataFrame(rows, columns=ALPHA_COLUMNS)


def selection_table(runs: pd.DataFrame) -> pd.DataFrame:
    """Selected-pair counts per (method, v1), pairs ordered by their median grid test AUC."""
    columns = ["method", "v1", "model_t1", "model_t2", "count", "grid_median_auc"]
    ok = runs[runs["status"] == "ok"]
    chosen = ok[ok["method"].isin(SEARCH_METHODS)]
    if chosen.empty:
        return pd.DataFrame(columns=columns)
    counts = chosen.groupby(["method", "v1", "model_t1", "model_t2"]).size().rename("count").reset_index()
    grid = ok[ok["method"].isin(GRID_METHODS)]
    medians = grid.groupby(["model_t1", "model_t2"])["auc_t2"].median().rename("grid_median_auc").reset_index()
    table = counts.merge(medians, on=["model_t1", "model_t2"], how="left")
    table = table.sort_values(["method", "v1", "grid_median_auc", "model_t1", "model_t2"],
                              ascending=[True, True, False, True, True], na_position="last", kind="mergesort")
    return table[columns].reset_index(drop=True)


# ---------------------------------------------------------------------------
# Charts
# ---------------------------------------------------------------------------

def _save(fig, path: Path):
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise OSError(f"Could not write {path}: {e}") from e
    finally:
        plt.close(fig)


def plot_metrics_vs_v1(runs: pd.DataFrame, path: Path) -> bool:
    """Median Task1 loss, Task2 AUC and GP validity against v1, one line per method."""
    ok = runs[(runs["status"] == "ok") & runs["method"].isin(V1_METHODS)]
    if ok.empty:
        return False
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6), constrained_layout=True)
    panels = [("mse_t1", "Task1 loss"), ("auc_t2", "Task2 AUC"), ("gp_fraction", "GP 2-sigma fraction")]
    for ax, (column, title) in zip(axes, panels):
        for method, group in ok.groupby("method"):
            medians = group.groupby("v1")[column].median().sort_index()
            if medians.notna().any():
                ax.plot(medians.index, medians.values, marker="o", label=method)
        ax.set_title(title)
        ax.set_xlabel("v1")
        ax.grid(True, alpha=0.3)
    axes[0].set_yscale("log")
    axes[-1].legend(loc="best", fontsize=8)
    _save(fig, path)
    return True


def plot_alpha_trajectory(alpha: pd.DataFrame, path: Path) -> bool:
    """softmax(alpha) per candidate over epochs; one thin line per run."""
    if alpha.empty:
        return False
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), constrained_layout=True)
    colors = {}
    for ax, task in zip(axes, (1, 2)):
        rows = alpha[alpha["task"] == task]
        for (run_id, candidate), group in rows.groupby(["run_id", "candidate"]):
            if candidate not in colors:
                colors[candidate] = f"C{len(colors) % 10}"
            label = candidate if run_id == rows["run_id"].min() else None
            ax.plot(group["epoch"], group["softmax"], color=colors[candidate], alpha=0.5,
                    linewidth=0.8, label=label)
        ax.set_title(f"Task{task} architecture weights")
        ax.set_xlabel("epoch")
        ax.set_ylim(0.0, 1.0)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best", fontsize=7)
    axes[0].set_ylabel("softmax(alpha)")
    _save(fig, path)
    return True


def plot_selections(table: pd.DataFrame, path: Path) -> bool:
    """Stacked selection counts per v1, one panel per method."""
    if table.empty:
        return False
    methods = sorted(table["method"].unique())
    fig, axes = plt.subplots(1, len(methods), figsize=(5 * len(methods), 3.6),
                             constrained_layout=True, squeeze=False)
    for ax, method in zip(axes[0], methods):
        rows = table[table["method"] == method]
        v1_values = sorted(rows["v1"].unique())
        positions = np.arange(len(v1_values))
        bottom = np.zeros(len(v1_values))
        pairs = rows.drop_duplicates(["model_t1", "model_t2"])[["model_t1", "model_t2"]]
        for i, (m1, m2) in enumerate(pairs.itertuples(index=False, name=None)):
            counts = np.array([rows[(rows["v1"] == v) & (rows["model_t1"] == m1) & (rows["model_t2"] == m2)]["count"].sum()
                               for v in v1_values], dtype=np.float64)
            ax.bar(positions, counts, bottom=bottom, color=f"C{i % 10}", label=f"{m1} + {m2}")
            bottom += counts
        ax.set_xticks(positions)
        ax.set_xticklabels([f"{v:g}" for v in v1_values])
        ax.set_xlabel("v1")
        ax.set_title(f"{method} selections")
        ax.legend(loc="best", fontsize=6)
    axes[0][0].set_ylabel("runs")
    _save(fig, path)
    return True


def plot_reopt_comparison(runs: pd.DataFrame, path: Path) -> bool:
    """Test AUC per pair with and without re-optimization over seeds."""
    ok = runs[(runs["status"] == "ok") & runs["method"].isin(["reopt", "no-reopt"])]
    if ok.empty:
        return False
    pairs = sorted(set(zip(ok["model_t1"], ok["model_t2"])))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(pairs)), 4), constrained_layout=True)
    for offset, (method, color) in zip((-0.2, 0.2), (("reopt", "C0"), ("no-reopt", "C1"))):
        data = [ok[(ok["method"] == method) & (ok["model_t1"] == m1) & (ok["model_t2"] == m2)]["auc_t2"].values
                for m1, m2 in pairs]
        positions = [i + offset for i, values in enumerate(data) if len(values)]
        data = [values for values in data if len(values)]
        if data:
            box = ax.boxplot(data, positions=positions, widths=0.35, patch_artist=True)
            for patch in box["boxes"]:
                patch.set_facecolor(color)
            ax.plot([], [], color=color, label=method)
    ax.set_xticks(range(len(pairs)))
    ax.set_xticklabels([f"{m1}\n{m2}" for m1, m2 in pairs], fontsize=6)
    ax.set_ylabel("Task2 test AUC")
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)
    return True


def plot_scaling(timings: pd.DataFrame, fits: pd.DataFrame, path: Path) -> bool:
    """Mean wall time against candidates per task on log-log axes, with fitted lines."""
    scaled = timings[timings["run_id"].fillna("") == ""] if not timings.empty else timings
    if scaled.empty:
        return False
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    summary = scaled.groupby(["method", "n_events", "n_models"])["wall_seconds"].agg(["mean", "std"]).reset_index()
    for i, ((method, n_events), group) in enumerate(summary.groupby(["method", "n_events"])):
        color = f"C{i % 10}"
        ax.errorbar(group["n_models"], group["mean"], yerr=group["std"].fillna(0.0), fmt="o", color=color,
                    label=f"{method} ({n_events} events)")
        fit = fits[(fits["method"] == method) & (fits["n_events"] == n_events)] if not fits.empty else fits
        if len(fit):
            row = fit.iloc[0]
            xs = np.linspace(group["n_models"].min(), group["n_models"].max(), 50)
            ax.plot(xs, row["C"] * xs ** row["a"], color=color, linewidth=1,
                    label=f"C={row['C']:.3g}, a={row['a']:.2f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("models per task")
    ax.set_ylabel("wall time [s]")
    ax.legend(loc="best", fontsize=7)
    _save(fig, path)
    return True


def plot_scaling_auc(auc: pd.DataFrame, path: Path) -> bool:
    if auc.empty:
        return False
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    for method, group in auc.groupby("method"):
        medians = group.groupby("n_models")["auc_t2"].median().sort_index()
        ax.plot(medians.index, medians.values, marker="o", label=method)
    ax.set_xlabel("models per task")
    ax.set_ylabel("Task2 test AUC")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)
    return True


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def emit_report(reports: Sequence[RunReport], out_dir: str,
                extra_timings: Sequence[TimingRecord] = ()) -> Dict[str, Path]:
    """Write or update the CSV tables and charts for a batch of runs."""
    if not reports:
        raise ValueError("no runs")
    path = Path(out_dir)
    with _write_lock:
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"Could not create report directory {out_dir}: {e}") from e
        merge_table(path / RUNS_FILE, runs_frame(reports), ["run_id"],
                    ["method", "seed", "v1", "model_t1", "model_t2", "run_id"])
        timings = timings_frame(list(run_timings(reports)) + list(extra_timings))
        if not timings.empty:
            merge_table(path / TIMINGS_FILE, timings, TIMING_KEY, TIMING_KEY)
        alpha = alpha_frame(reports)
        if not alpha.empty:
            merge_table(path / ALPHA_FILE, alpha, ["run_id", "epoch", "task", "candidate"],
                        ["run_id", "task", "candidate", "epoch"])
        written = _render(path)
    logger.info(f"Report for {len(reports)} runs written to {path}")
    return written


def emit_scaling_report(result: ScalingResult, out_dir: str) -> Dict[str, Path]:
    """Timings, fits and AUC-vs-size tables of a scaling study."""
    if not result.timings:
        raise ValueError("no runs")
    path = Path(out_dir)
    with _write_lock:
        path.mkdir(parents=True, exist_ok=True)
        merge_table(path / TIMINGS_FILE, timings_frame(result.timings), TIMING_KEY, TIMING_KEY)
        fits = pd.DataFrame([{"method": m, "n_events": n, **fit.to_dict()} for (m, n), fit in result.fits.items()],
                            columns=["method", "n_events", "C", "a", "residual", "x_min", "x_max", "n_points"])
        merge_table(path / FITS_FILE, fits, ["method", "n_events"], ["method", "n_events"])
        auc = pd.DataFrame(result.auc_rows, columns=["method", "k", "n_models", "seed", "auc_t2"])
        merge_table(path / SCALING_AUC_FILE, auc, ["method", "k", "seed"], ["method", "k", "seed"])
        written = _render(path)
    logger.info(f"Scaling report written to {path}")
    return written


def rebuild_report(out_dir: str) -> Dict[str, Path]:
    """Re-render selections and charts from the tables already in out_dir."""
    path = Path(out_dir)
    if not any((path / name).exists() for name in (RUNS_FILE, TIMINGS_FILE)):
        raise FileNotFoundError(f"No report tables in {out_dir}")
    with _write_lock:
        return _render(path)


def _render(path: Path) -> Dict[str, Path]:
    written: Dict[str, Path] = {}
    runs = read_table(path / RUNS_FILE)
    if runs is not None:
        written[RUNS_FILE] = path / RUNS_FILE
        table = selection_table(runs)
        _write_table(path / SELECTIONS_FILE, table)
        written[SELECTIONS_FILE] = path / SELECTIONS_FILE
        for name, plot in (("metrics_vs_v1.svg", plot_metrics_vs_v1),
                           ("reopt_comparison.svg", plot_reopt_comparison)):
            if plot(runs, path / name):
                written[name] = path / name
        if plot_selections(table, path / "selections.svg"):
            written["selections.svg"] = path / "selections.svg"
    alpha = read_table(path / ALPHA_FILE)
    if alpha is not None and plot_alpha_trajectory(alpha, path / "alpha_trajectory.svg"):
        written["alpha_trajectory.svg"] = path / "alpha_trajectory.svg"
    timings = read_table(path / TIMINGS_FILE)
    if timings is not None:
        written[TIMINGS_FILE] = path / TIMINGS_FILE
        fits = read_table(path / FITS_FILE)
        if plot_scaling(timings, fits if fits is not None else pd.DataFrame(), path / "scaling.svg"):
            written["scaling.svg"] = path / "scaling.svg"
    auc = read_table(path / SCALING_AUC_FILE)
    if auc is not None and plot_scaling_auc(auc, path / "scaling_auc.svg"):
        written["scaling_auc.svg"] = path / "scaling_auc.svg"
    return written


def load_runs(out_dir: str) -> List[RunReport]:
    frame = read_table(Path(out_dir) / RUNS_FILE)
    if frame is None:
        raise FileNotFoundError(f"No {RUNS_FILE} in {out_dir}")
    return [RunReport.from_row(row) for row in frame.to_dict("records")]
