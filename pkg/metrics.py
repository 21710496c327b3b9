"""
Evaluation Metrics

Rank-based ROC AUC and test-set evaluation of a (Task1, Task2) model pair.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
from scipy.stats import rankdata

import autodiff as ad
from autodiff import ForwardContext
from losses import loss_task1, model_inputs

EVAL_CHUNK = 512


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative example")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pair_count(scores, labels) -> float:
    """AUC by direct pair counting (ties count one half); O(n+ * n-)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos = scores[labels == 1][:, None]
    neg = scores[labels != 1][None, :]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative example")
    return float(((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (pos.size * neg.size))


@dataclass
class PairMetrics:
    """Test-set performance of one connected pair."""
    mse_t1: float
    auc_t2: float
    n_events: int

    def to_dict(self) -> Dict[str, Any]:
        return {"mse_t1": self.mse_t1, "auc_t2": self.auc_t2, "n_events": self.n_events}


def predict_pair(model1, model2, batch, params=None, seed: int = 0):
    """Task1 predictions (N, 2, 3) and Task2 logits (N,) in chunks."""
    ctx = ForwardContext(rng=np.random.default_rng(seed), training=False)
    preds, logits = [], []
    for chunk in batch.minibatches(EVAL_CHUNK):
        p1 = params if params is not None else model1.parameters
        p2 = params if params is not None else model2.parameters
        taus = model1.forward(model_inputs(chunk, p1.dtype), p1, ctx)
        logit = model2.forward({"taus": ad.constant(taus.data, dtype=p2.dtype)}, p2, ctx)
        preds.append(taus.data)
        logits.append(logit.data)
    return np.concatenate(preds), np.concatenate(logits)


def evaluate_pair(model1, model2, batch, params=None, seed: int = 0) -> PairMetrics:
    """Task1 loss (1e-4 scaled MSE) and Task2 AUC on a held-out batch."""
    preds, logits = predict_pair(model1, model2, batch, params, seed)
    mse = loss_task1(ad.constant(preds.astype(np.float64)), batch.truth.astype(np.float64)).item()
    return PairMetrics(mse_t1=mse, auc_t2=auc(logits, batch.labels), n_events=len(batch))
