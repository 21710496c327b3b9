#!/usr/bin/env python3
"""
Gaussian-Process Validity Oracle

Exact GP regression (RBF kernel with one length scale per input dimension)
used as a reference predictor for the Task1 outputs. One GP is fitted per
scalar output (pt, eta, phi of each tau) on the normalized jet 4-vector of
that candidate. A Task1 model prediction is "valid" when it lies within two
posterior standard deviations of the GP mean.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import json
import logging
import math

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from autodiff import ParameterRegistry
from optim import AdamState, adam_step

logger = logging.getLogger(__name__)

OUTPUT_NAMES = ("pt1", "eta1", "phi1", "pt2", "eta2", "phi2")
GP_META_FILE = "gp.json"
GP_PAYLOAD_FILE = "gp.npz"


class GPFitError(RuntimeError):
    """Raised when the kernel matrix stays singular after jitter escalation."""


@dataclass
class GPConfig:
    max_points: int = 2000
    opt_points: int = 500
    steps: int = 200
    lr: float = 0.05
    jitter: float = 1e-6
    max_jitter: float = 1e-3
    init_noise_variance: float = 1e-2
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.max_points < 2 or self.opt_points < 2:
            raise ValueError("GP subsamples need at least two points")
        if not 0 < self.jitter <= self.max_jitter:
            raise ValueError(f"jitter must be in (0, max_jitter], got {self.jitter}")
        if self.init_noise_variance <= 0:
            raise ValueError("initial noise variance must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GPConfig':
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


def rbf_kernel(x1: np.ndarray, x2: np.ndarray, signal_variance: float,
               length_scales: np.ndarray) -> np.ndarray:
    """signal_variance * exp(-0.5 * sum_d ((x1_d - x2_d) / l_d)^2)."""
    a = np.asarray(x1, dtype=np.float64) / length_scales
    b = np.asarray(x2, dtype=np.float64) / length_scales
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def _factor(K: np.ndarray, jitter: float, max_jitter: float) -> Tuple[Tuple[np.ndarray, bool], float]:
    """Cholesky of K + jitter*I, raising jitter tenfold until it succeeds."""
    eye = np.eye(len(K))
    current = jitter
    while current <= max_jitter * (1 + 1e-9):
        try:
            return cho_factor(K + current * eye, lower=True), current
        except LinAlgError:
            logger.debug(f"Cholesky failed with jitter {current:.1e}, escalating")
            current *= 10.0
    raise GPFitError(f"Kernel matrix not positive definite up to jitter {max_jitter:.1e}")


@dataclass
class GPModel:
    """Fitted GP: hyperparameters, training subsample and the posterior weights."""
    signal_variance: float
    length_scales: np.ndarray
    noise_variance: float
    x_train: np.ndarray
    y_train: np.ndarray
    y_mean: float
    chol: np.ndarray
    weights: np.ndarray
    jitter: float
    indices: Optional[np.ndarray] = None
    log_marginal_likelihood: float = float("nan")

    def hyperparameters(self) -> Dict[str, Any]:
        return {
            "signal_variance": self.signal_variance,
            "length_scales": np.asarray(self.length_scales).tolist(),
            "noise_variance": self.noise_variance,
            "y_mean": self.y_mean,
            "jitter": self.jitter,
            "log_marginal_likelihood": self.log_marginal_likelihood,
        }


def log_marginal_likelihood(x: np.ndarray, y: np.ndarray, log_sf2: float, log_ls: np.ndarray,
                            log_sn2: float, jitter: float, max_jitter: float):
    """LML of centred targets and its gradient w.r.t. the log hyperparameters."""
    sf2, ls, sn2 = math.exp(log_sf2), np.exp(log_ls), math.exp(log_sn2)
    Kf = rbf_kernel(x, x, sf2, ls)
    factor, _ = _factor(Kf + sn2 * np.eye(len(x)), jitter, max_jitter)
    alpha = cho_solve(factor, y)
    n = len(x)
    lml = -0.5 * y @ alpha - np.log(np.diag(factor[0])).sum() - 0.5 * n * math.log(2 * math.pi)
    W = np.outer(alpha, alpha) - cho_solve(factor, np.eye(n))
    grad_sf2 = 0.5 * np.sum(W * Kf)
    grad_sn2 = 0.5 * np.trace(W) * sn2
    grad_ls = np.empty_like(ls)
    for d in range(len(ls)):
        diff = (x[:, d][:, None] - x[:, d][None, :]) ** 2 / ls[d] ** 2
        grad_ls[d] = 0.5 * np.sum(W * Kf * diff)
    return float(lml), float(grad_sf2), grad_ls, float(grad_sn2)


def gp_fit(inputs: np.ndarray, targets: np.ndarray, cfg: Optional[GPConfig] = None,
           indices: Optional[np.ndarray] = None) -> GPModel:
    """Maximize the LML by Adam ascent on log hyperparameters, then factor the full subsample."""
    cfg = cfg or GPConfig()
    x = np.asarray(inputs, dtype=np.float64)
    y_raw = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or len(x) != len(y_raw):
        raise ValueError(f"inputs {x.shape} and targets {y_raw.shape} do not match")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y_raw))):
        raise ValueError("GP training data must be finite")
    y_mean = float(y_raw.mean())
    y = y_raw - y_mean

    rng = np.random.default_rng(cfg.seed)
    opt = np.arange(len(x)) if len(x) <= cfg.opt_points else np.sort(
        rng.choice(len(x), cfg.opt_points, replace=False))
    spread = x.std(axis=0)
    hyper = ParameterRegistry(np.float64)
    hyper.add("log_sf2", np.array(math.log(max(y.var(), 1e-6))))
    hyper.add("log_ls", np.log(np.where(spread > 0, spread, 1.0)))
    hyper.add("log_sn2", np.array(math.log(cfg.init_noise_variance)))
    state = AdamState(lr=cfg.lr)
    lml = float("nan")
    for step in range(cfg.steps):
        lml, g_sf2, g_ls, g_sn2 = log_marginal_likelihood(
            x[opt], y[opt], hyper["log_sf2"].data.item(), hyper["log_ls"].data,
            hyper["log_sn2"].data.item(), cfg.jitter, cfg.max_jitter)
        # ascent: hand Adam the negated gradient
        adam_step(state, hyper, {"log_sf2": np.array(-g_sf2), "log_ls": -g_ls, "log_sn2": np.array(-g_sn2)})
        for tensor in hyper.tensors():
            np.clip(tensor.data, -18.0, 10.0, out=tensor.data)

    sf2 = math.exp(hyper["log_sf2"].data.item())
    ls = np.exp(hyper["log_ls"].data.copy())
    sn2 = math.exp(hyper["log_sn2"].data.item())
    K = rbf_kernel(x, x, sf2, ls) + sn2 * np.eye(len(x))
    factor, used_jitter = _factor(K, cfg.jitter, cfg.max_jitter)
    weights = cho_solve(factor, y)
    chol = np.tril(factor[0])
    logger.debug(f"GP fit on {len(x)} points: sf2={sf2:.3g} ls={np.round(ls, 3).tolist()} "
                 f"sn2={sn2:.3g} lml={lml:.4g}")
    return GPModel(sf2, ls, sn2, x, y, y_mean, chol, weights, used_jitter,
                   None if indices is None else np.asarray(indices), lml)


def gp_predict(model: GPModel, x) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance (including the noise variance)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise ValueError("GP query points must be finite")
    k_star = rbf_kernel(model.x_train, x, model.signal_variance, model.length_scales)
    mean = k_star.T @ model.weights + model.y_mean
    v = solve_triangular(model.chol, k_star, lower=True)
    variance = model.signal_variance - (v * v).sum(axis=0) + model.noise_variance
    return mean, np.maximum(variance, 0.0)


@dataclass
class ValidityReport:
    """Fraction of predictions inside the GP two-sigma band, per output and overall."""
    per_variable: Dict[str, float]
    overall: float
    n_events: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {"per_variable": self.per_variable, "overall": self.overall, "n_events": self.n_events}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ValidityReport':
        return cls(dict(data["per_variable"]), float(data["overall"]), int(data.get("n_events", 0)))


def band_fraction(predictions: np.ndarray, means: np.ndarray, variances: np.ndarray) -> float:
    inside = np.abs(np.asarray(predictions) - means) <= 2.0 * np.sqrt(variances)
    return float(inside.mean())


def gp_inputs(jets: np.ndarray, candidate: int) -> np.ndarray:
    """Normalized jet 4-vector of one candidate, (N, 4)."""
    return np.asarray(jets[:, candidate, :], dtype=np.float64)


def fit_task1_gps(batch, cfg: Optional[GPConfig] = None) -> List[GPModel]:
    """Six GPs, ordered pt1, eta1, phi1, pt2, eta2, phi2, on a shared subsample."""
    cfg = cfg or GPConfig()
    rng = np.random.default_rng(cfg.seed)
    n = len(batch)
    indices = np.arange(n) if n <= cfg.max_points else np.sort(rng.choice(n, cfg.max_points, replace=False))
    jobs = [(k, v) for k in range(2) for v in range(3)]

    def fit(job):
        k, v = job
        return gp_fit(gp_inputs(batch.jets[indices], k), batch.truth[indices, k, v], cfg, indices)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            models = list(pool.map(fit, jobs))
    else:
        models = [fit(job) for job in jobs]
    logger.info(f"Fitted {len(models)} GPs on {len(indices)} training events")
    return models


def validity_fraction(predictions: np.ndarray, gps: Sequence[GPModel], jets: np.ndarray) -> ValidityReport:
    """Compare Task1 predictions (N, 2, 3) with the GP bands on the same events."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if len(gps) != len(OUTPUT_NAMES):
        raise ValueError(f"expected {len(OUTPUT_NAMES)} GPs, got {len(gps)}")
    per_variable = {}
    for idx, name in enumerate(OUTPUT_NAMES):
        k, v = divmod(idx, 3)
        mean, var = gp_predict(gps[idx], gp_inputs(jets, k))
        per_variable[name] = band_fraction(predictions[:, k, v], mean, var)
    overall = float(np.mean(list(per_variable.values())))
    return ValidityReport(per_variable, overall, len(predictions))


def save_gps(gps: Sequence[GPModel], out_dir: str, cfg: GPConfig, dataset_sha256: str = ""):
    """JSON hyperparameters and indices plus an npz payload of arrays."""
    path = Path(out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
        meta = {
            "config": cfg.to_dict(),
            "dataset_sha256": dataset_sha256,
            "outputs": list(OUTPUT_NAMES[:len(gps)]),
            "models": [gp.hyperparameters() for gp in gps],
            "indices": None if gps[0].indices is None else gps[0].indices.tolist(),
        }
        with open(path / GP_META_FILE, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2)
        arrays = {}
        for i, gp in enumerate(gps):
            arrays[f"x_{i}"] = gp.x_train
            arrays[f"y_{i}"] = gp.y_train
            arrays[f"chol_{i}"] = gp.chol
            arrays[f"weights_{i}"] = gp.weights
        np.savez(path / GP_PAYLOAD_FILE, **arrays)
    except OSError as e:
        raise OSError(f"Could not write GP models to {out_dir}: {e}") from e


def load_gps(gp_dir: str) -> Tuple[List[GPModel], Dict[str, Any]]:
    path = Path(gp_dir)
    try:
        with open(path / GP_META_FILE, "r", encoding="utf-8") as f:
            meta = json.load(f)
        payload = np.load(path / GP_PAYLOAD_FILE)
    except FileNotFoundError:
        raise FileNotFoundError(f"No fitted GPs in {gp_dir}")
    indices = None if meta.get("indices") is None else np.asarray(meta["indices"])
    gps = []
    for i, hp in enumerate(meta["models"]):
        gps.append(GPModel(
            signal_variance=hp["signal_variance"],
            length_scales=np.asarray(hp["length_scales"]),
            noise_variance=hp["noise_variance"],
            x_train=payload[f"x_{i}"],
            y_train=payload[f"y_{i}"],
            y_mean=hp["y_mean"],
            chol=payload[f"chol_{i}"],
            weights=payload[f"weights_{i}"],
            jitter=hp["jitter"],
            indices=indices,
            log_marginal_likelihood=hp.get("log_marginal_likelihood", float("nan")),
        ))
    return gps, meta
