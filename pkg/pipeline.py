#!/usr/bin/env python3
"""
Multi-Step Pipeline Training and Model Selection

Three ways of choosing one Task1 and one Task2 model out of candidate lists:

- darts_search: all candidates live in one supernet; their outputs are mixed
  with softmax(alpha) weights. alpha is descended on validation batches, model
  weights on training batches; the argmax of alpha picks the models.
- spos_search: one uniformly sampled path per training batch updates a
  supernet without mixing; every combination is then scored on the
  validation set with frozen weights.
- grid_search: every pair is trained on its own, either sequentially or
  with a connected re-optimization after separate pre-training.

train_models is the shared Adam + early-stopping loop used for pre-training
and post-training.
"""

from dataclasses import dataclass, field
from itertools import product
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import logging
import time

import numpy as np

import autodiff as ad
from autodiff import ForwardContext, NonFiniteError, ParameterRegistry, Tensor
from losses import (combined_loss_darts, combined_loss_spos, loss_task1,
                    loss_task2_logits, model_inputs)
from metrics import PairMetrics, evaluate_pair
from optim import AdamState, EarlyStopping, adam_step

logger = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 7919


class TrainingError(RuntimeError):
    """Raised when a loss or gradient turns non-finite during training."""


@dataclass
class SelectionConfig:
    """Task weights, optimizer and stopping settings of one selection run."""
    v1: float = 0.5
    epsilon: float = 1.0
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    search_patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.v1 <= 1.0:
            raise ValueError(f"v1 must be in [0, 1], got {self.v1}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not (0 < self.patience < self.max_epochs and 0 < self.search_patience < self.max_epochs):
            raise ValueError(f"patience ({self.patience}, {self.search_patience}) must be "
                             f"positive and below max_epochs ({self.max_epochs})")

    @property
    def v2(self) -> float:
        return 1.0 - self.v1

    @property
    def weights(self) -> Tuple[float, float]:
        return (self.v1, self.v2)

    @property
    def eval_seed(self) -> int:
        return self.seed + EVAL_SEED_OFFSET

    def to_dict(self) -> Dict[str, Any]:
        return {
            "v1": self.v1, "epsilon": self.epsilon, "lr": self.lr, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "patience": self.patience,
            "search_patience": self.search_patience, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SelectionConfig':
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainReport:
    """Loss curves and stopping information of one training phase."""
    phase: str
    train_losses: List[float] = field(default_factory=list)
    valid_losses: List[float] = field(default_factory=list)
    stop_epoch: int = 0
    stop_reason: str = "max_epochs"
    best_epoch: int = 0
    best_valid_loss: float = float("inf")
    wall_seconds: float = 0.0
    alpha_trajectory: Optional[List[Dict[int, List[float]]]] = None
    phase_seconds: Dict[str, float] = field(default_factory=dict)
    path_counts: Optional[Dict[str, int]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "phase": self.phase,
            "train_losses": self.train_losses,
            "valid_losses": self.valid_losses,
            "stop_epoch": self.stop_epoch,
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "best_valid_loss": self.best_valid_loss,
            "wall_seconds": self.wall_seconds,
            "alpha_trajectory": self.alpha_trajectory,
            "phase_seconds": self.phase_seconds,
            "path_counts": self.path_counts,
        }


@dataclass
class SelectedCombo:
    """One model id per task plus where the choice came from."""
    task1: str
    task2: str
    provenance: str
    validation_loss: float = float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {"task1": self.task1, "task2": self.task2, "provenance": self.provenance,
                "validation_loss": self.validation_loss}


class SupernetState:
    """Candidate models of both tasks, their architecture weights and one shared registry."""

    def __init__(self, task1_models: Sequence, task2_models: Sequence, dtype=np.float32):
        if not task1_models or not task2_models:
            raise ValueError("Each task needs at least one candidate")
        self.task1 = list(task1_models)
        self.task2 = list(task2_models)
        self.weights = ParameterRegistry.union([m.parameters for m in self.task1 + self.task2])
        self.architecture = ParameterRegistry(dtype)
        self.alpha1 = self.architecture.add("alpha/t1", np.zeros(len(self.task1)))
        self.alpha2 = self.architecture.add("alpha/t2", np.zeros(len(self.task2)))
        self.parameters = ParameterRegistry.union([self.weights, self.architecture])

    def alphas(self) -> Dict[int, np.ndarray]:
        return {1: self.alpha1.data.astype(np.float64), 2: self.alpha2.data.astype(np.float64)}

    def coefficients(self) -> Dict[int, np.ndarray]:
        return {task: softmax(alpha) for task, alpha in self.alphas().items()}

    def candidate_ids(self) -> Dict[int, List[str]]:
        return {1: [m.model_id for m in self.task1], 2: [m.model_id for m in self.task2]}

    def loss(self, batch, ctx: ForwardContext, cfg: SelectionConfig) -> Tensor:
        return combined_loss_darts(batch, self.task1, self.task2, self.alpha1, self.alpha2,
                                   self.parameters, ctx, cfg.weights, cfg.epsilon)


def softmax(values: np.ndarray) -> np.ndarray:
    shifted = np.exp(values - np.max(values))
    return shifted / shifted.sum()


def argmax_index(alpha) -> int:
    """Index of the largest weight; ties go to the lowest index."""
    alpha = np.asarray(alpha)
    if alpha.size == 0:
        raise ValueError("Cannot select from an empty candidate list")
    return int(np.argmax(alpha))


def select_argmax(alphas: Dict[int, np.ndarray], candidates: Dict[int, Sequence[str]],
                  provenance: str = "darts", validation_loss: float = float("nan")) -> SelectedCombo:
    return SelectedCombo(
        task1=candidates[1][argmax_index(alphas[1])],
        task2=candidates[2][argmax_index(alphas[2])],
        provenance=provenance,
        validation_loss=validation_loss,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

LossFn = Callable[[Any, ParameterRegistry, ForwardContext], Tensor]


def evaluate_loss(loss_fn: LossFn, batch, params: ParameterRegistry, cfg: SelectionConfig) -> float:
    """Event-weighted mean loss over mini-batches with a fixed evaluation rng."""
    ctx = ForwardContext(rng=np.random.default_rng(cfg.eval_seed), training=False)
    total, count = 0.0, 0
    for chunk in batch.minibatches(cfg.batch_size):
        total += loss_fn(chunk, params, ctx).item() * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def _descend(loss: Tensor, params: ParameterRegistry, state: AdamState, phase: str):
    try:
        grads = ad.gradients(params, loss)
        adam_step(state, params, grads)
    except NonFiniteError as e:
        raise TrainingError(f"{phase}: non-finite gradient at {e.node} (loss={loss.item():.6g})") from e


def _checked_loss(loss_fn: LossFn, batch, params, ctx, phase: str) -> Tensor:
    try:
        return loss_fn(batch, params, ctx)
    except NonFiniteError as e:
        raise TrainingError(f"{phase}: non-finite value at node {e.node}") from e


def train_models(models: Sequence, loss_fn: LossFn, train, valid, cfg: SelectionConfig,
                 rng: np.random.Generator, patience: Optional[int] = None,
                 phase: str = "train") -> TrainReport:
    """Adam on mini-batches with early stopping on the validation loss.

    The parameters of all given models are trained jointly; the best
    validation state is restored when training stops.
    """
    started = time.perf_counter()
    patience = cfg.patience if patience is None else patience
    params = ParameterRegistry.union([m.parameters for m in models])
    report = TrainReport(phase=phase)
    if len(params) == 0:
        report.stop_reason = "no_parameters"
        report.best_valid_loss = evaluate_loss(loss_fn, valid, params, cfg)
        report.wall_seconds = time.perf_counter() - started
        return report

    state = AdamState(lr=cfg.lr)
    stopper = EarlyStopping(patience)
    ctx = ForwardContext(rng=rng, training=True)
    for epoch in range(1, cfg.max_epochs + 1):
        total, count = 0.0, 0
        for batch in train.minibatches(cfg.batch_size, rng):
            loss = _checked_loss(loss_fn, batch, params, ctx, phase)
            _descend(loss, params, state, phase)
            total += loss.item() * len(batch)
            count += len(batch)
        valid_loss = evaluate_loss(loss_fn, valid, params, cfg)
        report.train_losses.append(total / max(count, 1))
        report.valid_losses.append(valid_loss)
        report.stop_epoch = epoch
        if not np.isfinite(valid_loss):
            raise TrainingError(f"{phase}: non-finite validation loss at epoch {epoch}")
        logger.debug(f"{phase} epoch {epoch}: train {report.train_losses[-1]:.6g} valid {valid_loss:.6g}")
        if stopper.update(epoch, valid_loss, params.state_dict):
            report.stop_reason = "early_stop"
            break

    params.load_state_dict(stopper.best_state)
    report.best_epoch = stopper.best_epoch
    report.best_valid_loss = stopper.best_loss
    report.wall_seconds = time.perf_counter() - started
    logger.info(f"{phase}: stopped at epoch {report.stop_epoch} ({report.stop_reason}), "
                f"best valid {report.best_valid_loss:.6g} at epoch {report.best_epoch}")
    return report


def task_loss_fn(model) -> LossFn:
    """Stand-alone objective of one model on ground truth (pre-training)."""
    if model.task == 1:
        def loss_fn(batch, params, ctx):
            return loss_task1(model.forward(model_inputs(batch, params.dtype), params, ctx), batch.truth)
    else:
        def loss_fn(batch, params, ctx):
            taus = ad.constant(batch.truth, dtype=params.dtype)
            return loss_task2_logits(model.forward({"taus": taus}, params, ctx), batch.labels)
    return loss_fn


def pair_loss_fn(model1, model2, cfg: SelectionConfig) -> LossFn:
    """Connected objective of one path."""
    def loss_fn(batch, params, ctx):
        return combined_loss_spos(batch, model1, model2, params, ctx, cfg.weights)
    return loss_fn


def pretrain(models: Sequence, train, valid, cfg: SelectionConfig,
             rng: np.random.Generator) -> Dict[str, TrainReport]:
    """Train every candidate on its own task against ground truth."""
    return {m.model_id: train_models([m], task_loss_fn(m), train, valid, cfg, rng, phase=f"pretrain {m.model_id}")
            for m in models}


def pretrain_states(models: Sequence, train, valid, cfg: SelectionConfig,
                    rng: np.random.Generator) -> Tuple[Dict[str, Dict[str, np.ndarray]], Dict[str, int]]:
    """Pre-trained states and stop epochs per model; the models keep their initial weights."""
    states: Dict[str, Dict[str, np.ndarray]] = {}
    epochs: Dict[str, int] = {}
    for m in models:
        if m.spec.is_dummy:
            continue
        initial = m.parameters.state_dict()
        rep = train_models([m], task_loss_fn(m), train, valid, cfg, rng, phase=f"pretrain {m.model_id}")
        states[m.model_id] = m.parameters.state_dict()
        epochs[m.model_id] = rep.stop_epoch
        m.parameters.load_state_dict(initial)
    return states, epochs


def post_train(model1, model2, train, valid, cfg: SelectionConfig, rng: np.random.Generator) -> TrainReport:
    """Train the selected pair as one connected model."""
    return train_models([model1, model2], pair_loss_fn(model1, model2, cfg), train, valid, cfg, rng,
                        phase=f"post-train {model1.model_id}+{model2.model_id}")


# ---------------------------------------------------------------------------
# DARTS
# ---------------------------------------------------------------------------

def darts_search(supernet: SupernetState, train, valid, cfg: SelectionConfig,
                 rng: np.random.Generator) -> Tuple[SelectedCombo, TrainReport]:
    """First-order alternating search; alpha on validation batches, w on training batches."""
    started = time.perf_counter()
    report = TrainReport(phase="darts", alpha_trajectory=[])
    arch_state = AdamState(lr=cfg.lr)
    weight_state = AdamState(lr=cfg.lr)
    stopper = EarlyStopping(cfg.search_patience)
    ctx = ForwardContext(rng=rng, training=True)
    arch_names = set(supernet.architecture.names())
    loss_fn = lambda batch, params, c: supernet.loss(batch, c, cfg)

    for epoch in range(1, cfg.max_epochs + 1):
        valid_batches = list(valid.minibatches(cfg.batch_size, rng))
        train_batches = list(train.minibatches(cfg.batch_size, rng))
        total, count = 0.0, 0
        for i in range(max(len(valid_batches), len(train_batches))):
            if i < len(valid_batches):
                loss = _checked_loss(loss_fn, valid_batches[i], supernet.parameters, ctx, "darts")
                grads = {k: g for k, g in ad.gradients(supernet.parameters, loss).items() if k in arch_names}
                _apply(arch_state, supernet.parameters, grads, loss, "darts alpha")
            if i < len(train_batches):
                loss = _checked_loss(loss_fn, train_batches[i], supernet.parameters, ctx, "darts")
                grads = {k: g for k, g in ad.gradients(supernet.parameters, loss).items() if k not in arch_names}
                _apply(weight_state, supernet.parameters, grads, loss, "darts weights")
                total += loss.item() * len(train_batches[i])
                count += len(train_batches[i])

        valid_loss = evaluate_loss(loss_fn, valid, supernet.parameters, cfg)
        report.train_losses.append(total / max(count, 1))
        report.valid_losses.append(valid_loss)
        report.alpha_trajectory.append({t: a.tolist() for t, a in supernet.alphas().items()})
        report.stop_epoch = epoch
        logger.debug(f"darts epoch {epoch}: valid {valid_loss:.6g} softmax(alpha) "
                     f"{ {t: np.round(c, 3).tolist() for t, c in supernet.coefficients().items()} }")
        if stopper.update(epoch, valid_loss, supernet.parameters.state_dict):
            report.stop_reason = "early_stop"
            break

    supernet.parameters.load_state_dict(stopper.best_state)
    report.best_epoch = stopper.best_epoch
    report.best_valid_loss = stopper.best_loss
    report.wall_seconds = time.perf_counter() - started
    combo = select_argmax(supernet.alphas(), supernet.candidate_ids(), "darts", stopper.best_loss)
    logger.info(f"darts: selected ({combo.task1}, {combo.task2}) after {report.stop_epoch} epochs")
    return combo, report


def _apply(state: AdamState, params: ParameterRegistry, grads, loss: Tensor, phase: str):
    try:
        adam_step(state, params, grads)
    except NonFiniteError as e:
        raise TrainingError(f"{phase}: non-finite gradient at {e.node} (loss={loss.item():.6g})") from e


# ---------------------------------------------------------------------------
# SPOS
# ---------------------------------------------------------------------------

def sample_path(rng: np.random.Generator, n_task1: int, n_task2: int) -> Tuple[int, int]:
    """One candidate index per task, uniformly."""
    return int(rng.integers(n_task1)), int(rng.integers(n_task2))


def spos_search(task1_models: Sequence, task2_models: Sequence, train, valid, cfg: SelectionConfig,
                rng: np.random.Generator) -> Tuple[SelectedCombo, TrainReport]:
    """Uniform single-path supernet training, then exhaustive scoring of all combinations."""
    started = time.perf_counter()
    task1 = [m for m in task1_models if not m.spec.is_dummy]
    task2 = [m for m in task2_models if not m.spec.is_dummy]
    if len(task1) < len(task1_models) or len(task2) < len(task2_models):
        logger.warning("spos: dummy candidates are not supported and were dropped")
    if not task1 or not task2:
        raise ValueError("spos needs at least one non-dummy candidate per task")

    report = TrainReport(phase="spos")
    params = ParameterRegistry.union([m.parameters for m in task1 + task2])
    state = AdamState(lr=cfg.lr)
    stopper = EarlyStopping(cfg.search_patience)
    ctx = ForwardContext(rng=rng, training=True)
    counts = np.zeros((len(task1), len(task2)), dtype=np.int64)

    def path_loss(batch, params_, c, i, j):
        return combined_loss_spos(batch, task1[i], task2[j], params_, c, cfg.weights)

    for epoch in range(1, cfg.max_epochs + 1):
        total, n = 0.0, 0
        for batch in train.minibatches(cfg.batch_size, rng):
            i, j = sample_path(rng, len(task1), len(task2))
            counts[i, j] += 1
            loss = _checked_loss(lambda b, p, c: path_loss(b, p, c, i, j), batch, params, ctx, "spos")
            path_params = ParameterRegistry.union([task1[i].parameters, task2[j].parameters])
            _descend(loss, path_params, state, "spos")
            total += loss.item() * len(batch)
            n += len(batch)

        # validation statistic: mean over uniformly sampled paths, fixed rng per epoch
        eval_rng = np.random.default_rng(cfg.eval_seed)
        eval_ctx = ForwardContext(rng=eval_rng, training=False)
        v_total, v_n = 0.0, 0
        for batch in valid.minibatches(cfg.batch_size):
            i, j = sample_path(eval_rng, len(task1), len(task2))
            v_total += path_loss(batch, params, eval_ctx, i, j).item() * len(batch)
            v_n += len(batch)
        valid_loss = v_total / max(v_n, 1)
        report.train_losses.append(total / max(n, 1))
        report.valid_losses.append(valid_loss)
        report.stop_epoch = epoch
        logger.debug(f"spos epoch {epoch}: train {report.train_losses[-1]:.6g} valid {valid_loss:.6g}")
        if stopper.update(epoch, valid_loss, params.state_dict):
            report.stop_reason = "early_stop"
            break

    params.load_state_dict(stopper.best_state)
    report.best_epoch = stopper.best_epoch
    report.best_valid_loss = stopper.best_loss
    supernet_done = time.perf_counter()
    report.phase_seconds["spos-supernet"] = supernet_done - started

    best: Optional[Tuple[int, int]] = None
    best_loss = float("inf")
    for i, j in product(range(len(task1)), range(len(task2))):
        loss = evaluate_loss(lambda b, p, c: path_loss(b, p, c, i, j), valid, params, cfg)
        logger.debug(f"spos search ({task1[i].model_id}, {task2[j].model_id}): {loss:.6g}")
        if loss < best_loss:
            best, best_loss = (i, j), loss
    if best is None:
        raise TrainingError("spos: no combination produced a finite validation loss")
    report.phase_seconds["spos-search"] = time.perf_counter() - supernet_done
    report.path_counts = {f"{task1[i].model_id}+{task2[j].model_id}": int(counts[i, j])
                          for i, j in product(range(len(task1)), range(len(task2)))}
    report.wall_seconds = time.perf_counter() - started
    combo = SelectedCombo(task1[best[0]].model_id, task2[best[1]].model_id, "spos", best_loss)
    logger.info(f"spos: selected ({combo.task1}, {combo.task2}) with validation loss {best_loss:.6g}")
    return combo, report


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

@dataclass
class PairResult:
    """One trained pair of a grid search."""
    task1: str
    task2: str
    validation_loss: float
    reoptimized: bool
    epochs_task1: int = 0
    epochs_task2: int = 0
    epochs_post: int = 0
    test: Optional[PairMetrics] = None
    state: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task1": self.task1, "task2": self.task2, "validation_loss": self.validation_loss,
            "reoptimized": self.reoptimized, "epochs_task1": self.epochs_task1,
            "epochs_task2": self.epochs_task2, "epochs_post": self.epochs_post,
            "test": self.test.to_dict() if self.test else None,
        }


@dataclass
class GridResult:
    ranked: List[PairResult]
    trainings: int
    wall_seconds: float

    @property
    def best(self) -> PairResult:
        return self.ranked[0]

    def combo(self) -> SelectedCombo:
        return SelectedCombo(self.best.task1, self.best.task2, "grid", self.best.validation_loss)


class _TaskInputs:
    """A batch whose Task2 inputs are fixed predictions of a trained Task1 model."""

    def __init__(self, batch, taus: np.ndarray):
        self.batch = batch
        self.taus = taus

    def __len__(self):
        return len(self.batch)

    def minibatches(self, batch_size, rng=None):
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield _TaskInputs(self.batch.take(idx), self.taus[idx])

    @property
    def labels(self):
        return self.batch.labels


def grid_search(task1_models: Sequence, task2_models: Sequence, train, valid, cfg: SelectionConfig,
                rng: np.random.Generator, reoptimize: bool, test=None,
                pretrained: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
                pretrained_epochs: Optional[Dict[str, int]] = None) -> GridResult:
    """Train and rank all N1 x N2 pairs by validation combined loss.

    Without re-optimization, Task1 models are trained on ground truth and each
    Task2 model is trained from its initial weights on the Task1 predictions.
    With re-optimization, all models are pre-trained separately and each pair
    is then trained as one connected model with cfg's task weights.
    `pretrained` maps model ids to pre-trained states (see pretrain_states)
    to skip pre-training; the models must hold their initial weights.
    Every pair leaves its models in their trained state; the state is kept
    on the PairResult.
    """
    started = time.perf_counter()
    task1 = [m for m in task1_models if not m.spec.is_dummy]
    task2 = [m for m in task2_models if not m.spec.is_dummy]
    initial = {m.model_id: m.parameters.state_dict() for m in task1 + task2}
    pretrained = dict(pretrained or {})
    pre_epochs = dict(pretrained_epochs or {})

    missing = [m for m in task1 + (task2 if reoptimize else []) if m.model_id not in pretrained]
    states, epochs = pretrain_states(missing, train, valid, cfg, rng)
    pretrained.update(states)
    pre_epochs.update(epochs)

    results: List[PairResult] = []
    trainings = 0
    for m1, m2 in product(task1, task2):
        m1.parameters.load_state_dict(pretrained[m1.model_id])
        if reoptimize:
            m2.parameters.load_state_dict(pretrained[m2.model_id])
            rep = post_train(m1, m2, train, valid, cfg, rng)
            result = PairResult(m1.model_id, m2.model_id, rep.best_valid_loss, True,
                                pre_epochs.get(m1.model_id, 0), pre_epochs.get(m2.model_id, 0), rep.stop_epoch)
        else:
            m2.parameters.load_state_dict(initial[m2.model_id])
            rep = _train_on_predictions(m1, m2, train, valid, cfg, rng)
            loss = evaluate_loss(pair_loss_fn(m1, m2, cfg), valid,
                                 ParameterRegistry.union([m1.parameters, m2.parameters]), cfg)
            result = PairResult(m1.model_id, m2.model_id, loss, False,
                                pre_epochs.get(m1.model_id, 0), rep.stop_epoch)
        trainings += 1
        if test is not None:
            result.test = evaluate_pair(m1, m2, test, seed=cfg.eval_seed)
        result.state = {**m1.parameters.state_dict(), **m2.parameters.state_dict()}
        results.append(result)
        logger.info(f"grid ({m1.model_id}, {m2.model_id}) reopt={reoptimize}: "
                    f"valid {result.validation_loss:.6g}"
                    + (f", test AUC {result.test.auc_t2:.4f}" if result.test else ""))

    order = sorted(range(len(results)), key=lambda k: results[k].validation_loss)
    return GridResult([results[k] for k in order], trainings, time.perf_counter() - started)


def _train_on_predictions(model1, model2, train, valid, cfg: SelectionConfig,
                          rng: np.random.Generator) -> TrainReport:
    """Fit a Task2 model on the frozen outputs of a trained Task1 model."""
    fixed_train = _TaskInputs(train, predict_pair_taus(model1, train, cfg))
    fixed_valid = _TaskInputs(valid, predict_pair_taus(model1, valid, cfg))

    def loss_fn(batch, params, ctx):
        taus = ad.constant(batch.taus, dtype=params.dtype)
        return loss_task2_logits(model2.forward({"taus": taus}, params, ctx), batch.labels)

    return train_models([model2], loss_fn, fixed_train, fixed_valid, cfg, rng,
                        phase=f"sequential {model1.model_id}->{model2.model_id}")


def predict_pair_taus(model1, batch, cfg: SelectionConfig) -> np.ndarray:
    ctx = ForwardContext(rng=np.random.default_rng(cfg.eval_seed), training=False)
    outputs = [model1.forward(model_inputs(chunk, model1.parameters.dtype), model1.parameters, ctx).data
               for chunk in batch.minibatches(cfg.batch_size)]
    return np.concatenate(outputs)
