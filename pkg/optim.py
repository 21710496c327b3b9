#!/usr/bin/env python3
"""
Optimizers and Training Control

Adam with bias correction over a ParameterRegistry, and the early-stopping
tracker shared by pre-training, architecture search and post-training.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional
import logging

import numpy as np

from autodiff import NonFiniteError, ParameterRegistry, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moment accumulators and step counters for one optimizer."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Betas must be in [0, 1), got ({self.beta1}, {self.beta2})")


def adam_step(state: AdamState, parameters: ParameterRegistry, grads: Dict[str, np.ndarray]):
    """Apply one Adam update in place to every parameter that has a gradient.

    Parameters absent from grads are left alone and keep their own bias
    correction counters, so alternating updates of disjoint parameter sets
    (architecture weights vs model weights) stay independent.
    """
    for name, grad in grads.items():
        param = parameters[name]
        if grad.shape != param.shape:
            raise ShapeError(name, f"gradient shape {grad.shape} does not match parameter {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(name, "non-finite gradient")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, grad in grads.items():
        param = parameters[name]
        grad = grad.astype(param.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        v = state.v[name]
        t = state.steps.get(name, 0) + 1
        state.steps[name] = t
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)


class EarlyStopping:
    """Track validation loss, stop after `patience` epochs without improvement.

    An epoch improves when loss < best - min_delta. The snapshot passed with
    the best epoch is kept so callers can restore it.
    """

    def __init__(self, patience: int, min_delta: float = 0.0):
        if patience < 1:
            raise ValueError(f"Patience must be at least 1, got {patience}")
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.best_state: Optional[Any] = None
        self.wait = 0

    def update(self, epoch: int, loss: float, snapshot: Any = None) -> bool:
        """Record an epoch; return True when training should stop."""
        if loss < self.best_loss - self.min_delta:
            self.best_loss = loss
            self.best_epoch = epoch
            self.best_state = snapshot() if callable(snapshot) else snapshot
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            logger.debug(f"Early stop at epoch {epoch}: best {self.best_loss:.6g} at epoch {self.best_epoch}")
            return True
        return False
