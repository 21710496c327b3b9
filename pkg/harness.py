#!/usr/bin/env python3
"""
Experiment Harness

Runs the three model-selection studies on a stored dataset:

- run_method_experiment: per (seed, v1), pre-train -> search (darts, spos or
  grid) -> post-train -> test metrics -> GP validity, one RunReport each.
- reopt_study: every pair trained with and without connected
  re-optimization, then a task-weight sweep of the best re-optimized pair.
- scaling_experiment: wall time of each selection method as the candidate
  lists are replicated k times, with power-law fits C * n^a.

Every metric in a RunReport is reproducible from (dataset, config, seed);
wall times are carried on the report but written to a separate file.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import hashlib
import json
import logging
import threading
import time

import numpy as np

from dataset_store import EventDataset
from gp_validity import GPConfig, GPModel, fit_task1_gps, load_gps, save_gps, validity_fraction
from metrics import evaluate_pair, predict_pair
from modelzoo import base_specs, build_model, load_model, replicate_models, save_model
from pipeline import (SelectionConfig, SupernetState, darts_search, grid_search, post_train, pretrain,
                      pretrain_states, spos_search)
from run_metrics import RunMetrics

logger = logging.getLogger(__name__)

METHODS = ("darts", "spos", "grid", "reopt-study", "scaling", "gp-validity")
SEARCH_METHODS = ("darts", "spos", "grid")
SCALING_METHODS = ("darts", "spos", "grid")
STATUS_OK = "ok"
RUN_FILE = "run.json"
GP_DIR = "gp"
MODELS_DIR = "models"


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """One harness invocation: dataset, method, seeds, task weights and run settings."""
    data_dir: str = ""
    method: str = "darts"
    v1_list: List[float] = field(default_factory=lambda: [0.0, 0.1, 0.5, 0.9, 0.99])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    include_dummies: bool = False
    replicas: List[int] = field(default_factory=lambda: [1])
    out_dir: str = "results"
    workers: int = 1
    n_events: Optional[int] = None
    repeats: int = 1
    scaling_methods: List[str] = field(default_factory=lambda: list(SCALING_METHODS))
    fit_max_points: Dict[str, int] = field(default_factory=dict)
    save_models: bool = False
    selection: Dict[str, Any] = field(default_factory=dict)
    gp: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method {self.method}; expected one of {METHODS}")
        if not self.seeds:
            raise ConfigError("At least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"Seeds must be distinct, got {self.seeds}")
        if not self.v1_list:
            raise ConfigError("At least one v1 value is required")
        for v1 in self.v1_list:
            if not 0.0 <= v1 <= 1.0:
                raise ConfigError(f"v1 values must be in [0, 1], got {v1}")
        if any(k < 1 for k in self.replicas) or not self.replicas:
            raise ConfigError(f"Replica counts must be at least 1, got {self.replicas}")
        if self.include_dummies and self.method != "darts":
            raise ConfigError("Dummy candidates are only supported with --method darts")
        if self.workers < 1 or self.repeats < 1:
            raise ConfigError(f"workers ({self.workers}) and repeats ({self.repeats}) must be positive")
        if self.n_events is not None and self.n_events < 10:
            raise ConfigError(f"n_events must be at least 10, got {self.n_events}")
        unknown = set(self.scaling_methods) - set(SCALING_METHODS)
        if unknown:
            raise ConfigError(f"Unknown scaling methods {sorted(unknown)}")
        # Fail early on bad nested settings
        try:
            SelectionConfig.from_dict(self.selection)
            GPConfig.from_dict(self.gp)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid selection/gp settings: {e}") from e

    def selection_config(self, seed: int, v1: float) -> SelectionConfig:
        return SelectionConfig.from_dict({**self.selection, "seed": seed, "v1": v1})

    def gp_config(self) -> GPConfig:
        return GPConfig.from_dict(self.gp)

    def fingerprint(self) -> Dict[str, Any]:
        """Settings that change results (paths, worker count and seed lists excluded)."""
        return {
            "include_dummies": self.include_dummies,
            "n_events": self.n_events,
            "selection": {k: v for k, v in SelectionConfig.from_dict(self.selection).to_dict().items()
                          if k not in ("seed", "v1")},
            "gp": {k: v for k, v in self.gp_config().to_dict().items() if k != "workers"},
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "data_dir": self.data_dir,
            "method": self.method,
            "v1_list": list(self.v1_list),
            "seeds": list(self.seeds),
            "include_dummies": self.include_dummies,
            "replicas": list(self.replicas),
            "out_dir": self.out_dir,
            "workers": self.workers,
            "n_events": self.n_events,
            "repeats": self.repeats,
            "scaling_methods": list(self.scaling_methods),
            "fit_max_points": dict(self.fit_max_points),
            "save_models": self.save_models,
            "selection": dict(self.selection),
            "gp": dict(self.gp),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    @classmethod
    def from_file(cls, file_path: str) -> 'ExperimentConfig':
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise FileNotFoundError(f"Config file not found: {file_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON format in {file_path}: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"{file_path}: top level must be a JSON object")
        return cls.from_dict(data)


@dataclass
class RunReport:
    """Outcome of one selection run (or one grid pair)."""
    run_id: str
    seed: int
    method: str
    v1: float
    model_t1: str = ""
    model_t2: str = ""
    mse_t1: float = float("nan")
    auc_t2: float = float("nan")
    gp_fraction: float = float("nan")
    epochs_pre: int = 0
    epochs_search: int = 0
    epochs_post: int = 0
    status: str = STATUS_OK
    wall_seconds: float = 0.0
    n_models: int = 0
    n_events: int = 0
    alpha_trajectory: Optional[List[Dict[int, List[float]]]] = None
    candidates: Optional[Dict[int, List[str]]] = None
    gp_per_variable: Optional[Dict[str, float]] = None

    CSV_COLUMNS = ("run_id", "seed", "method", "v1", "model_t1", "model_t2", "mse_t1", "auc_t2",
                   "gp_fraction", "epochs_pre", "epochs_search", "epochs_post", "status")

    def __post_init__(self):
        if self.status == STATUS_OK:
            if not 0.0 <= self.auc_t2 <= 1.0:
                raise ValueError(f"{self.run_id}: AUC {self.auc_t2} outside [0, 1]")
            if not self.mse_t1 >= 0.0:
                raise ValueError(f"{self.run_id}: negative or undefined Task1 loss {self.mse_t1}")

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def to_row(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.CSV_COLUMNS}

    @classmethod
    def from_row(cls, row: Dict[str, Any]) -> 'RunReport':
        values = {name: row[name] for name in cls.CSV_COLUMNS}
        for name in ("seed", "epochs_pre", "epochs_search", "epochs_post"):
            values[name] = int(values[name])
        for name in ("v1", "mse_t1", "auc_t2", "gp_fraction"):
            values[name] = float(values[name])
        for name in ("model_t1", "model_t2", "status", "run_id", "method"):
            values[name] = values[name] if isinstance(values[name], str) else ""
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        data = self.to_row()
        data.update({
            "wall_seconds": self.wall_seconds,
            "n_models": self.n_models,
            "n_events": self.n_events,
            "alpha_trajectory": self.alpha_trajectory,
            "candidates": self.candidates,
            "gp_per_variable": self.gp_per_variable,
        })
        return data


@dataclass
class PowerLawFit:
    """y = C * x^a fitted by least squares in log-log space."""
    C: float
    a: float
    residual: float
    x_range: Tuple[float, float]
    n_points: int

    def predict(self, x) -> np.ndarray:
        return self.C * np.power(np.asarray(x, dtype=np.float64), self.a)

    def to_dict(self) -> Dict[str, Any]:
        return {"C": self.C, "a": self.a, "residual": self.residual,
                "x_min": self.x_range[0], "x_max": self.x_range[1], "n_points": self.n_points}


@dataclass
class TimingRecord:
    """Wall time of one timed phase."""
    method: str
    n_models: int
    n_events: int
    wall_seconds: float
    repeat: int = 0
    run_id: str = ""
    trainings: int = 0

    CSV_COLUMNS = ("run_id", "method", "n_models", "n_events", "repeat", "wall_seconds", "trainings")

    def to_row(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.CSV_COLUMNS}


@dataclass
class ScalingResult:
    timings: List[TimingRecord]
    fits: Dict[Tuple[str, int], PowerLawFit]
    auc_rows: List[Dict[str, Any]]

    def summary(self) -> List[Dict[str, Any]]:
        """Mean and standard deviation of wall time per (method, n_events, n_models)."""
        groups: Dict[Tuple[str, int, int], List[float]] = {}
        for t in self.timings:
            groups.setdefault((t.method, t.n_events, t.n_models), []).append(t.wall_seconds)
        return [{"method": m, "n_events": e, "n_models": n, "mean_seconds": float(np.mean(v)),
                 "std_seconds": float(np.std(v)), "repeats": len(v)}
                for (m, e, n), v in sorted(groups.items())]


def fit_power_law(points: Sequence[Tuple[float, float]], max_points: Optional[int] = None) -> PowerLawFit:
    """Least squares on (log x, log y); max_points keeps only the smallest x values."""
    pts = sorted((float(x), float(y)) for x, y in points)
    if max_points is not None:
        pts = pts[:max_points]
    if len(pts) < 2:
        raise ValueError(f"A power-law fit needs at least 2 points, got {len(pts)}")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("Power-law fit needs strictly positive coordinates")
    log_x, log_y = np.log(x), np.log(y)
    if np.ptp(log_x) == 0:
        raise ValueError("Power-law fit needs at least two distinct x values")
    design = np.vstack([log_x, np.ones_like(log_x)]).T
    coeffs, _, _, _ = np.linalg.lstsq(design, log_y, rcond=None)
    a, log_c = coeffs
    residual = float(np.sum((log_y - design @ coeffs) ** 2))
    return PowerLawFit(C=float(np.exp(log_c)), a=float(a), residual=residual,
                       x_range=(float(x.min()), float(x.max())), n_points=len(pts))


def make_run_id(cfg: ExperimentConfig, seed: int, v1: float, method: str, checksum: str,
                pair: Tuple[str, str] = ("", "")) -> str:
    key = json.dumps({"cfg": cfg.fingerprint(), "seed": seed, "v1": v1, "method": method,
                      "pair": list(pair), "dataset": checksum}, sort_keys=True)
    return hashlib.sha256(key.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Shared state
# ---------------------------------------------------------------------------

_gp_lock = threading.Lock()


def prepare_dataset(cfg: ExperimentConfig, dataset: EventDataset) -> EventDataset:
    return dataset.subset(cfg.n_events) if cfg.n_events else dataset


def ensure_gps(dataset: EventDataset, data_dir: Optional[str], gp_cfg: GPConfig) -> List[GPModel]:
    """Fit the six Task1 GPs on the training split, cached under DATA/gp/<checksum>."""
    with _gp_lock:
        cache = Path(data_dir) / GP_DIR / dataset.checksum[:12] if data_dir else None
        wanted = {k: v for k, v in gp_cfg.to_dict().items() if k != "workers"}
        if cache is not None and (cache / "gp.json").exists():
            try:
                gps, meta = load_gps(str(cache))
                stored = {k: v for k, v in meta.get("config", {}).items() if k != "workers"}
                if meta.get("dataset_sha256") == dataset.checksum and stored == wanted:
                    logger.info(f"Using cached GPs from {cache}")
                    return gps
                logger.info(f"GP cache in {cache} is stale; refitting")
            except (OSError, KeyError, ValueError) as e:
                logger.warning(f"Ignoring unreadable GP cache {cache}: {e}")
        gps = fit_task1_gps(dataset.split("train"), gp_cfg)
        if cache is not None:
            try:
                save_gps(gps, str(cache), gp_cfg, dataset.checksum)
            except OSError as e:
                logger.warning(f"Could not cache GPs: {e}")
        return gps


def build_candidates(task: int, seed: int, include_dummies: bool = False, k: int = 1) -> List:
    return [build_model(spec) for spec in replicate_models(base_specs(task, include_dummies, seed), k)]


def _validity(model1, model2, batch, gps: Optional[Sequence[GPModel]], seed: int):
    if not gps:
        return float("nan"), None
    preds, _ = predict_pair(model1, model2, batch, seed=seed)
    report = validity_fraction(preds, gps, batch.jets)
    return report.overall, report.per_variable


def _sum_epochs(reports) -> int:
    return int(sum(r.stop_epoch for r in reports))


def _failed(cfg: ExperimentConfig, seed: int, v1: float, method: str, checksum: str,
            error: Exception, pair: Tuple[str, str] = ("", "")) -> RunReport:
    return RunReport(run_id=make_run_id(cfg, seed, v1, method, checksum, pair), seed=seed, method=method,
                     v1=v1, model_t1=pair[0], model_t2=pair[1], status=f"failed:{type(error).__name__}")


def _sort_key(report: RunReport):
    return (report.method, report.seed, report.v1, report.model_t1, report.model_t2)


def _run_parallel(jobs: Sequence, fn, workers: int) -> List:
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


# ---------------------------------------------------------------------------
# Model-selection study
# ---------------------------------------------------------------------------

def run_search(cfg: ExperimentConfig, dataset: EventDataset, seed: int, v1: float,
               gps: Optional[Sequence[GPModel]] = None) -> RunReport:
    """One darts or spos run: pre-train, search, post-train, evaluate."""
    started = time.perf_counter()
    sel = cfg.selection_config(seed, v1)
    rng = np.random.default_rng(seed)
    train, valid, test = dataset.split("train"), dataset.split("valid"), dataset.split("test")
    task1 = build_candidates(1, seed, cfg.include_dummies)
    task2 = build_candidates(2, seed, cfg.include_dummies)
    by_id = {m.model_id: m for m in task1 + task2}

    pre = pretrain([m for m in task1 + task2 if not m.spec.is_dummy], train, valid, sel, rng)
    if cfg.method == "darts":
        combo, search = darts_search(SupernetState(task1, task2), train, valid, sel, rng)
    else:
        combo, search = spos_search(task1, task2, train, valid, sel, rng)
    model1, model2 = by_id[combo.task1], by_id[combo.task2]
    post = post_train(model1, model2, train, valid, sel, rng)

    result = evaluate_pair(model1, model2, test, seed=sel.eval_seed)
    overall, per_variable = _validity(model1, model2, test, gps, sel.eval_seed)
    run_id = make_run_id(cfg, seed, v1, cfg.method, dataset.checksum)
    if cfg.save_models:
        save_selected(cfg.out_dir, run_id, model1, model2, seed, v1, sel.eval_seed)
    return RunReport(
        run_id=run_id, seed=seed, method=cfg.method, v1=v1,
        model_t1=combo.task1, model_t2=combo.task2,
        mse_t1=result.mse_t1, auc_t2=result.auc_t2, gp_fraction=overall,
        epochs_pre=_sum_epochs(pre.values()), epochs_search=search.stop_epoch, epochs_post=post.stop_epoch,
        wall_seconds=time.perf_counter() - started,
        n_models=len(task1), n_events=len(train),
        alpha_trajectory=search.alpha_trajectory,
        candidates={1: [m.model_id for m in task1], 2: [m.model_id for m in task2]},
        gp_per_variable=per_variable,
    )


def run_grid(cfg: ExperimentConfig, dataset: EventDataset, seed: int, v1: float,
             gps: Optional[Sequence[GPModel]] = None) -> List[RunReport]:
    """All pairs with connected re-optimization; one row per pair plus a best-pair row."""
    started = time.perf_counter()
    sel = cfg.selection_config(seed, v1)
    rng = np.random.default_rng(seed)
    train, valid, test = dataset.split("train"), dataset.split("valid"), dataset.split("test")
    task1, task2 = build_candidates(1, seed), build_candidates(2, seed)
    by_id = {m.model_id: m for m in task1 + task2}

    grid = grid_search(task1, task2, train, valid, sel, rng, reoptimize=True, test=test)
    rows = _pair_rows(cfg, dataset, seed, v1, "grid", grid, by_id, test, gps, sel)
    best = next(r for r in rows if (r.model_t1, r.model_t2) == (grid.best.task1, grid.best.task2))
    summary = RunReport(
        run_id=make_run_id(cfg, seed, v1, "grid-best", dataset.checksum),
        seed=seed, method="grid-best", v1=v1, model_t1=best.model_t1, model_t2=best.model_t2,
        mse_t1=best.mse_t1, auc_t2=best.auc_t2, gp_fraction=best.gp_fraction,
        epochs_pre=best.epochs_pre, epochs_post=best.epochs_post,
        wall_seconds=time.perf_counter() - started, n_models=len(task1), n_events=len(train),
        gp_per_variable=best.gp_per_variable,
    )
    if cfg.save_models:
        _load_pair_state(grid, by_id, summary.model_t1, summary.model_t2)
        save_selected(cfg.out_dir, summary.run_id, by_id[summary.model_t1], by_id[summary.model_t2],
                      seed, v1, sel.eval_seed)
    return rows + [summary]


def _load_pair_state(grid, by_id, task1: str, task2: str):
    pair = next(p for p in grid.ranked if (p.task1, p.task2) == (task1, task2))
    by_id[task1].parameters.load_state_dict(pair.state)
    by_id[task2].parameters.load_state_dict(pair.state)
    return pair


def _pair_rows(cfg, dataset, seed: int, v1: float, method: str, grid, by_id, test, gps, sel) -> List[RunReport]:
    rows = []
    for pair in sorted(grid.ranked, key=lambda p: (p.task1, p.task2)):
        m1, m2 = by_id[pair.task1], by_id[pair.task2]
        _load_pair_state(grid, by_id, pair.task1, pair.task2)
        overall, per_variable = _validity(m1, m2, test, gps, sel.eval_seed)
        rows.append(RunReport(
            run_id=make_run_id(cfg, seed, v1, method, dataset.checksum, (pair.task1, pair.task2)),
            seed=seed, method=method, v1=v1, model_t1=pair.task1, model_t2=pair.task2,
            mse_t1=pair.test.mse_t1, auc_t2=pair.test.auc_t2, gp_fraction=overall,
            epochs_pre=pair.epochs_task1 + pair.epochs_task2, epochs_post=pair.epochs_post,
            n_models=len({p.task1 for p in grid.ranked}), n_events=len(dataset.split("train")),
            gp_per_variable=per_variable,
        ))
    return rows


def save_selected(out_dir: str, run_id: str, model1, model2, seed: int, v1: float, eval_seed: int):
    """Post-trained pair under OUT/models/<run_id>/ with a run.json naming both models.

    run.json also keeps the seed, v1 and evaluation seed so the pair can be
    re-evaluated on the same noise stream.
    """
    path = Path(out_dir) / MODELS_DIR / run_id
    try:
        save_model(model1, str(path))
        save_model(model2, str(path))
        with open(path / RUN_FILE, "w", encoding="utf-8") as f:
            json.dump({"run_id": run_id, "task1": model1.model_id, "task2": model2.model_id,
                       "seed": seed, "v1": v1, "eval_seed": eval_seed}, f, indent=2)
    except OSError as e:
        raise OSError(f"Could not save models of run {run_id} to {path}: {e}") from e


def run_method_experiment(cfg: ExperimentConfig, dataset: EventDataset,
                          metrics: Optional[RunMetrics] = None) -> List[RunReport]:
    """One report per (seed, v1) for darts/spos; pair rows plus a best-pair row for grid."""
    if cfg.method not in SEARCH_METHODS:
        raise ConfigError(f"run_method_experiment does not handle method {cfg.method}")
    dataset = prepare_dataset(cfg, dataset)
    gps = ensure_gps(dataset, cfg.data_dir, cfg.gp_config())
    jobs = list(product(cfg.seeds, cfg.v1_list))
    logger.info(f"{cfg.method}: {len(jobs)} runs on {len(dataset)} events with {cfg.workers} worker(s)")

    def run(job) -> List[RunReport]:
        seed, v1 = job
        try:
            if cfg.method == "grid":
                reports = run_grid(cfg, dataset, seed, v1, gps)
            else:
                reports = [run_search(cfg, dataset, seed, v1, gps)]
        except Exception as e:
            logger.error(f"{cfg.method} run seed={seed} v1={v1} failed: {e}", exc_info=True)
            reports = [_failed(cfg, seed, v1, cfg.method, dataset.checksum, e)]
        if metrics is not None:
            for r in reports:
                if r.method != "grid":
                    metrics.record_run(r.method, r.status, r.wall_seconds,
                                       {"pretrain": r.epochs_pre, "search": r.epochs_search,
                                        "posttrain": r.epochs_post},
                                       r.model_t1, r.model_t2, r.auc_t2 if r.ok else None)
        return reports

    results = [r for batch in _run_parallel(jobs, run, cfg.workers) for r in batch]
    return sorted(results, key=_sort_key)


# ---------------------------------------------------------------------------
# Re-optimization study
# ---------------------------------------------------------------------------

def reopt_seed(cfg: ExperimentConfig, dataset: EventDataset, seed: int,
               gps: Optional[Sequence[GPModel]] = None) -> List[RunReport]:
    """Both strategies for every pair at v1 = 0, then a v1 sweep of the best re-optimized pair."""
    train, valid, test = dataset.split("train"), dataset.split("valid"), dataset.split("test")
    rng = np.random.default_rng(seed)
    base = cfg.selection_config(seed, 0.0)
    task1, task2 = build_candidates(1, seed), build_candidates(2, seed)
    by_id = {m.model_id: m for m in task1 + task2}

    states, epochs = pretrain_states(task1 + task2, train, valid, base, rng)
    plain = grid_search(task1, task2, train, valid, base, rng, reoptimize=False, test=test,
                        pretrained=states, pretrained_epochs=epochs)
    rows = _pair_rows(cfg, dataset, seed, 0.0, "no-reopt", plain, by_id, test, gps, base)
    reopt = grid_search(task1, task2, train, valid, base, rng, reoptimize=True, test=test,
                        pretrained=states, pretrained_epochs=epochs)
    rows += _pair_rows(cfg, dataset, seed, 0.0, "reopt", reopt, by_id, test, gps, base)

    best1, best2 = reopt.best.task1, reopt.best.task2
    m1, m2 = by_id[best1], by_id[best2]
    # without re-optimization the pair does not depend on v1
    _load_pair_state(plain, by_id, best1, best2)
    plain_metrics = evaluate_pair(m1, m2, test, seed=base.eval_seed)
    plain_overall, plain_per_variable = _validity(m1, m2, test, gps, base.eval_seed)
    plain_pair = next(p for p in plain.ranked if (p.task1, p.task2) == (best1, best2))
    for v1 in cfg.v1_list:
        sel = cfg.selection_config(seed, v1)
        m1.parameters.load_state_dict(states[best1])
        m2.parameters.load_state_dict(states[best2])
        post = post_train(m1, m2, train, valid, sel, rng)
        result = evaluate_pair(m1, m2, test, seed=sel.eval_seed)
        overall, per_variable = _validity(m1, m2, test, gps, sel.eval_seed)
        rows.append(RunReport(
            run_id=make_run_id(cfg, seed, v1, "reopt-sweep", dataset.checksum, (best1, best2)),
            seed=seed, method="reopt-sweep", v1=v1, model_t1=best1, model_t2=best2,
            mse_t1=result.mse_t1, auc_t2=result.auc_t2, gp_fraction=overall,
            epochs_pre=epochs.get(best1, 0) + epochs.get(best2, 0), epochs_post=post.stop_epoch,
            n_models=len(task1), n_events=len(train), gp_per_variable=per_variable,
        ))
        rows.append(RunReport(
            run_id=make_run_id(cfg, seed, v1, "no-reopt-sweep", dataset.checksum, (best1, best2)),
            seed=seed, method="no-reopt-sweep", v1=v1, model_t1=best1, model_t2=best2,
            mse_t1=plain_metrics.mse_t1, auc_t2=plain_metrics.auc_t2, gp_fraction=plain_overall,
            epochs_pre=plain_pair.epochs_task1, epochs_post=plain_pair.epochs_task2,
            n_models=len(task1), n_events=len(train), gp_per_variable=plain_per_variable,
        ))
    return rows


def reopt_study(cfg: ExperimentConfig, dataset: EventDataset,
                metrics: Optional[RunMetrics] = None) -> List[RunReport]:
    dataset = prepare_dataset(cfg, dataset)
    gps = ensure_gps(dataset, cfg.data_dir, cfg.gp_config())
    logger.info(f"reopt study: {len(cfg.seeds)} seeds, v1 sweep {cfg.v1_list}")

    def run(seed: int) -> List[RunReport]:
        started = time.perf_counter()
        try:
            rows = reopt_seed(cfg, dataset, seed, gps)
            status = STATUS_OK
        except Exception as e:
            logger.error(f"reopt study seed={seed} failed: {e}", exc_info=True)
            rows = [_failed(cfg, seed, 0.0, "reopt", dataset.checksum, e)]
            status = rows[0].status
        if metrics is not None:
            metrics.record_run("reopt-study", status, time.perf_counter() - started)
        return rows

    results = [r for batch in _run_parallel(list(cfg.seeds), run, cfg.workers) for r in batch]
    return sorted(results, key=_sort_key)


# ---------------------------------------------------------------------------
# Scaling study
# ---------------------------------------------------------------------------

def _timed_run(method: str, k: int, seed: int, train, valid, test, base: SelectionConfig):
    """Timings (phase -> seconds), grid training count and test AUC of one scaling run.

    darts and spos pre-train their candidates first and time that as
    ``<method>-pretrain``; grid timing includes its own pre-training.
    """
    rng = np.random.default_rng(seed)
    task1, task2 = build_candidates(1, seed, k=k), build_candidates(2, seed, k=k)
    by_id = {m.model_id: m for m in task1 + task2}
    if method == "grid":
        started = time.perf_counter()
        grid = grid_search(task1, task2, train, valid, base, rng, reoptimize=True, test=test)
        return {"grid": time.perf_counter() - started}, grid.trainings, grid.best.test.auc_t2
    started = time.perf_counter()
    pretrain([m for m in task1 + task2 if not m.spec.is_dummy], train, valid, base, rng)
    timings = {f"{method}-pretrain": time.perf_counter() - started}
    if method == "darts":
        started = time.perf_counter()
        combo, _ = darts_search(SupernetState(task1, task2), train, valid, base, rng)
        timings["darts"] = time.perf_counter() - started
    else:
        combo, report = spos_search(task1, task2, train, valid, base, rng)
        timings.update(report.phase_seconds)
    model1, model2 = by_id[combo.task1], by_id[combo.task2]
    post_train(model1, model2, train, valid, base, rng)
    return timings, 0, evaluate_pair(model1, model2, test, seed=base.eval_seed).auc_t2


def scaling_experiment(cfg: ExperimentConfig, dataset: EventDataset,
                       metrics: Optional[RunMetrics] = None) -> ScalingResult:
    """Wall time per method against the number of candidates per task; runs serially."""
    if cfg.workers != 1:
        logger.warning(f"scaling: ignoring workers={cfg.workers}; timings are taken serially")
    dataset = prepare_dataset(cfg, dataset)
    train, valid, test = dataset.split("train"), dataset.split("valid"), dataset.split("test")
    seed = cfg.seeds[0]
    v1 = cfg.v1_list[0]
    timings: List[TimingRecord] = []
    auc_rows: List[Dict[str, Any]] = []

    for method, k in product(cfg.scaling_methods, sorted(cfg.replicas)):
        n_models = 3 * k
        for repeat in range(cfg.repeats):
            base = cfg.selection_config(seed + repeat, v1)
            try:
                phases, trainings, auc_value = _timed_run(method, k, seed + repeat, train, valid, test, base)
            except Exception as e:
                logger.error(f"scaling {method} k={k} repeat={repeat} failed: {e}", exc_info=True)
                if metrics is not None:
                    metrics.record_run(f"scaling-{method}", f"failed:{type(e).__name__}")
                continue
            for phase, seconds in phases.items():
                timings.append(TimingRecord(phase, n_models, len(train), seconds, repeat, trainings=trainings))
            auc_rows.append({"method": method, "k": k, "n_models": n_models, "seed": seed + repeat,
                             "auc_t2": auc_value})
            if metrics is not None:
                metrics.record_run(f"scaling-{method}", STATUS_OK, sum(phases.values()), auc=auc_value)
            logger.info(f"scaling {method} k={k} repeat={repeat}: "
                        + ", ".join(f"{p} {s:.2f}s" for p, s in phases.items()))

    result = ScalingResult(timings, {}, auc_rows)
    result.fits = fit_scaling(result.summary(), cfg.fit_max_points)
    return result


def fit_scaling(summary: Sequence[Dict[str, Any]],
                fit_max_points: Optional[Dict[str, int]] = None) -> Dict[Tuple[str, int], PowerLawFit]:
    """One fit per (method, n_events) on mean wall times."""
    fit_max_points = fit_max_points or {}
    series: Dict[Tuple[str, int], List[Tuple[float, float]]] = {}
    for row in summary:
        series.setdefault((row["method"], row["n_events"]), []).append((row["n_models"], row["mean_seconds"]))
    fits = {}
    for key, points in sorted(series.items()):
        if len({x for x, _ in points}) < 2:
            logger.info(f"scaling: not enough sizes to fit {key[0]} at {key[1]} events")
            continue
        fits[key] = fit_power_law(points, fit_max_points.get(key[0]))
        logger.info(f"scaling fit {key[0]} ({key[1]} events): C={fits[key].C:.4g} a={fits[key].a:.3f}")
    return fits


# ---------------------------------------------------------------------------
# GP validity of a stored run
# ---------------------------------------------------------------------------

def evaluate_saved_run(cfg: ExperimentConfig, dataset: EventDataset, run_id: str):
    """GP validity and test metrics of a run saved with save_models."""
    path = Path(cfg.out_dir) / MODELS_DIR / run_id
    try:
        with open(path / RUN_FILE, "r", encoding="utf-8") as f:
            run = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"No saved models for run {run_id} in {path}; "
                                "models are only saved by runs made with --save-models")
    dataset = prepare_dataset(cfg, dataset)
    model1 = load_model(str(path), run["task1"])
    model2 = load_model(str(path), run["task2"])
    test = dataset.split("test")
    gps = ensure_gps(dataset, cfg.data_dir, cfg.gp_config())
    eval_seed = int(run["eval_seed"])
    preds, _ = predict_pair(model1, model2, test, seed=eval_seed)
    report = validity_fraction(preds, gps, test.jets)
    pair = evaluate_pair(model1, model2, test, seed=eval_seed)
    return {"run_id": run_id, "seed": run["seed"], "v1": run["v1"], "task1": run["task1"], "task2": run["task2"],
            "validity": report.to_dict(), "test": pair.to_dict()}
