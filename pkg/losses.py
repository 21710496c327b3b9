"""
Task Losses and Output Aggregation

Task1 loss: mean squared momentum residual of both taus, measured in
de-normalized (pt [GeV], eta, phi) space and scaled by 1e-4.
Task2 loss: numerically stable binary cross-entropy on logits.

The combined objectives wire the two tasks into one connected pipeline:
Task2 candidates always consume Task1 output, never the truth.
"""

from typing import Dict, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import ForwardContext, ParameterRegistry, ShapeError, Tensor
from event import PT_OFFSET

TASK1_SCALE = 1e-4


def denormalize_taus(taus: Tensor) -> Tensor:
    """(B, 2, 3) normalized kinematics -> pt in GeV, eta and phi unchanged."""
    pt = ad.shift(ad.exp(ad.slice_tensor(taus, (slice(None), slice(None), slice(0, 1)))), -PT_OFFSET)
    angles = ad.slice_tensor(taus, (slice(None), slice(None), slice(1, 3)))
    return ad.concatenate([pt, angles], axis=2)


def loss_task1(pred: Tensor, truth) -> Tensor:
    """1e-4 * mean over events of |dp1|^2 + |dp2|^2 in physical units."""
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[1:] != (2, 3):
        raise ShapeError("loss_task1", f"prediction {pred.shape} and truth {truth.shape} must both be (batch, 2, 3)")
    target = np.array(truth, dtype=pred.dtype, copy=True)
    target[..., 0] = np.exp(target[..., 0]) - PT_OFFSET
    diff = ad.sub(denormalize_taus(pred), ad.constant(target))
    return ad.scale(ad.reduce_sum(ad.multiply(diff, diff)), TASK1_SCALE / pred.shape[0], name="loss_task1")


def loss_task2_logits(logits: Tensor, targets) -> Tensor:
    """Mean of max(y, 0) - y*t + log(1 + exp(-|y|))."""
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("Task2 targets must be 0 or 1")
    if logits.shape != targets.shape:
        raise ShapeError("loss_task2", f"logits {logits.shape} and targets {targets.shape} differ")
    return ad.reduce_mean(ad.bce_logits(logits, ad.constant(targets.astype(logits.dtype))), name="loss_task2")


def aggregate_outputs(outputs: Sequence[Tensor], alpha: Tensor) -> Tensor:
    """Sum_j softmax(alpha)_j * y_j."""
    if len(outputs) != alpha.size:
        raise ValueError(f"{alpha.size} architecture weights for {len(outputs)} candidate outputs")
    coefficients = ad.softmax(alpha, axis=0)
    total = None
    for j, output in enumerate(outputs):
        term = ad.multiply(output, ad.slice_tensor(coefficients, (j,)))
        total = term if total is None else ad.add(total, term)
    return total


def model_inputs(batch, dtype) -> Dict[str, Tensor]:
    return {
        "jets": ad.constant(batch.jets, dtype=dtype),
        "images": ad.constant(batch.images, dtype=dtype),
    }


def combined_loss_darts(batch, task1_models: Sequence, task2_models: Sequence,
                        alpha1: Tensor, alpha2: Tensor, params: ParameterRegistry,
                        ctx: ForwardContext, weights: Tuple[float, float], epsilon: float) -> Tensor:
    """Sum_t v_t * (L_t(aggregate) + epsilon * Sum_j L_t(candidate j)).

    Terms with a zero task weight are left out of the graph, so their
    parameters get zero gradient.
    """
    v1, v2 = weights
    inputs = model_inputs(batch, params.dtype)
    outputs1 = [m.forward(inputs, params, ctx) for m in task1_models]
    taus = aggregate_outputs(outputs1, alpha1)
    terms = []
    if v1 > 0:
        task1 = loss_task1(taus, batch.truth)
        if epsilon > 0:
            for out in outputs1:
                task1 = ad.add(task1, ad.scale(loss_task1(out, batch.truth), epsilon))
        terms.append(ad.scale(task1, v1))
    if v2 > 0:
        outputs2 = [m.forward({"taus": taus}, params, ctx) for m in task2_models]
        task2 = loss_task2_logits(aggregate_outputs(outputs2, alpha2), batch.labels)
        if epsilon > 0:
            for out in outputs2:
                task2 = ad.add(task2, ad.scale(loss_task2_logits(out, batch.labels), epsilon))
        terms.append(ad.scale(task2, v2))
    return _sum_terms(terms, params.dtype)


def combined_loss_spos(batch, model1, model2, params: ParameterRegistry, ctx: ForwardContext,
                       weights: Tuple[float, float]) -> Tensor:
    """v1 * L1 + v2 * L2 along one path; Task2 reads the Task1 prediction."""
    v1, v2 = weights
    taus = model1.forward(model_inputs(batch, params.dtype), params, ctx)
    terms = []
    if v1 > 0:
        terms.append(ad.scale(loss_task1(taus, batch.truth), v1))
    if v2 > 0:
        logits = model2.forward({"taus": taus}, params, ctx)
        terms.append(ad.scale(loss_task2_logits(logits, batch.labels), v2))
    return _sum_terms(terms, params.dtype)


def _sum_terms(terms, dtype) -> Tensor:
    if not terms:
        return ad.constant(np.zeros((), dtype=dtype), name="loss")
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total
