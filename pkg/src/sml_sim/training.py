from __future__ import annotations

from dataclasses import dataclass, replace
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .model import (
    ACTIVATIONS,
    EXP_CLAMP,
    LabeledDataset,
    LogitFunction,
    MLPArchitecture,
    MLPModel,
    TrainingHyperparameters,
    as_logit_function,
    augment_features,
    initialize_model,
    layer_activations,
    output_preactivations,
    project_to_norm_ball,
    softmax_rows,
)
from .util import derive_seed

_logger = logging.getLogger("sml_sim.training")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float) -> None:
        super().__init__(f"training diverged at epoch={epoch} batch={batch} loss={loss}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


@dataclass(frozen=True, eq=False)
class TrainingResult:
    model: MLPModel
    risk_trace: np.ndarray


def _require_nonempty(dataset: LabeledDataset) -> None:
    if dataset.size == 0:
        raise ValueError("risk of an empty dataset is undefined")


def logistic_risk(source: Union[MLPModel, LogitFunction, np.ndarray], dataset: LabeledDataset) -> float:
    """Mean of ``log(1 + exp(-gamma f(h)))`` with ``gamma = +1`` for ``classes[0]``."""
    _require_nonempty(dataset)
    if isinstance(source, np.ndarray):
        values = np.asarray(source, dtype=float).reshape(-1)
    else:
        values = np.asarray(as_logit_function(source)(dataset.features), dtype=float).reshape(-1)
    if values.shape[0] != dataset.size:
        raise ValueError(f"expected one logit per sample ({dataset.size}), got {values.shape[0]}")
    margins = np.clip(dataset.signed_labels() * values, -EXP_CLAMP, EXP_CLAMP)
    return float(np.mean(np.logaddexp(0.0, -margins)))


def cross_entropy_risk(
    source: Union[MLPModel, np.ndarray],
    dataset: LabeledDataset,
    sample_weights: Optional[np.ndarray] = None,
) -> float:
    _require_nonempty(dataset)
    outputs = output_preactivations(source, dataset.features) if isinstance(source, MLPModel) else np.atleast_2d(source)
    if outputs.shape != (dataset.size, len(dataset.classes)):
        raise ValueError(f"outputs shape {outputs.shape} does not match dataset ({dataset.size}, {len(dataset.classes)})")
    losses = _per_sample_losses(outputs, dataset.label_indices)
    if sample_weights is None:
        return float(np.mean(losses))
    return float(np.sum(_normalized_weights(sample_weights, dataset.size) * losses))


def _per_sample_losses(outputs: np.ndarray, label_indices: np.ndarray) -> np.ndarray:
    clipped = np.clip(outputs, -EXP_CLAMP, EXP_CLAMP)
    return logsumexp(clipped, axis=1) - clipped[np.arange(clipped.shape[0]), label_indices]


def _normalized_weights(sample_weights: np.ndarray, size: int) -> np.ndarray:
    weights = np.asarray(sample_weights, dtype=float).reshape(-1)
    if weights.shape[0] != size:
        raise ValueError(f"expected {size} sample weights, got {weights.shape[0]}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)) or weights.sum() <= 0:
        raise ValueError("sample weights must be finite, nonnegative and not all zero")
    return weights / weights.sum()


def backprop(model: MLPModel, inputs: np.ndarray, output_grad: np.ndarray) -> List[np.ndarray]:
    """Gradients w.r.t. every ``W_l`` of ``sum(output_grad * z)`` for bias-augmented ``inputs``."""
    derivative = ACTIVATIONS[model.architecture.activation].derivative
    pre, consumed = layer_activations(model, inputs)
    grads: List[np.ndarray] = [np.empty(0)] * len(model.weights)
    delta = output_grad
    for index in range(len(model.weights) - 1, -1, -1):
        grads[index] = delta.T @ consumed[index]
        if index > 0:
            delta = (delta @ model.weights[index]) * derivative(pre[index - 1])
    return grads


def _risk_and_gradient(
    model: MLPModel,
    inputs: np.ndarray,
    label_indices: np.ndarray,
    multipliers: np.ndarray,
) -> Tuple[float, List[np.ndarray]]:
    pre, _ = layer_activations(model, inputs)
    outputs = pre[-1]
    count = inputs.shape[0]
    loss = float(np.mean(multipliers * _per_sample_losses(outputs, label_indices)))
    output_grad = softmax_rows(outputs)
    output_grad[np.arange(count), label_indices] -= 1.0
    output_grad *= (multipliers / count)[:, np.newaxis]
    return loss, backprop(model, inputs, output_grad)


def risk_gradient(model: MLPModel, dataset: LabeledDataset) -> List[np.ndarray]:
    _require_nonempty(dataset)
    inputs = augment_features(model.architecture, dataset.features)
    _, grads = _risk_and_gradient(model, inputs, dataset.label_indices, np.ones(dataset.size))
    return grads


def _check_compatible(dataset: LabeledDataset, arch: MLPArchitecture) -> None:
    if dataset.size == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.dim != arch.feature_dim:
        raise ValueError(f"dataset dim={dataset.dim} does not match architecture feature_dim={arch.feature_dim}")
    if len(dataset.classes) != arch.num_classes:
        raise ValueError(f"dataset has {len(dataset.classes)} classes but the output layer has {arch.num_classes}")


def train_erm(
    dataset: LabeledDataset,
    arch: MLPArchitecture,
    hyper: TrainingHyperparameters,
    sample_weights: Optional[np.ndarray] = None,
) -> TrainingResult:
    _check_compatible(dataset, arch)
    model = initialize_model(arch, hyper.seed)
    shuffler = np.random.default_rng(derive_seed(hyper.seed, "shuffle"))
    inputs = augment_features(arch, dataset.features)
    label_indices = dataset.label_indices
    if sample_weights is None:
        multipliers = np.ones(dataset.size)
    else:
        # N * w_n keeps the uniform case identical to unweighted training
        multipliers = dataset.size * _normalized_weights(sample_weights, dataset.size)

    weights = [np.array(w) for w in model.weights]
    trace = np.empty(hyper.epochs)
    for epoch in range(hyper.epochs):
        order = shuffler.permutation(dataset.size)
        for batch, start in enumerate(range(0, dataset.size, hyper.batch_size)):
            rows = order[start:start + hyper.batch_size]
            loss, grads = _risk_and_gradient(model, inputs[rows], label_indices[rows], multipliers[rows])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(epoch, batch, loss)
            for index, grad in enumerate(grads):
                weights[index] = weights[index] - hyper.learning_rate * grad
                if arch.norm_bound is not None:
                    weights[index] = project_to_norm_ball(weights[index], arch.norm_bound)
            model = model.with_weights(weights)
        risk, _ = _risk_and_gradient(model, inputs, label_indices, multipliers)
        if not np.isfinite(risk):
            raise TrainingDivergedError(epoch, -1, risk)
        trace[epoch] = risk
        _logger.debug("Training epoch=%s risk=%s", epoch, risk)

    _logger.info(
        "Trained model layers=%s samples=%s epochs=%s final_risk=%s",
        arch.layer_sizes,
        dataset.size,
        hyper.epochs,
        trace[-1],
    )
    return TrainingResult(model=model, risk_trace=trace)


def gradient_check(model: MLPModel, dataset: LabeledDataset, epsilon: float = 1e-5) -> float:
    if dataset.size == 0:
        raise ValueError("gradient check needs at least one sample")
    if model.architecture.parameter_count > 10_000:
        raise ValueError(f"gradient check limited to 1e4 parameters, model has {model.architecture.parameter_count}")
    analytic = risk_gradient(model, dataset)
    worst = 0.0
    for index, w in enumerate(model.weights):
        for position in np.ndindex(w.shape):
            numeric = _central_difference(model, dataset, index, position, epsilon)
            exact = analytic[index][position]
            scale = max(abs(exact) + abs(numeric), 1e-4)
            worst = max(worst, abs(exact - numeric) / scale)
    return worst


def _central_difference(
    model: MLPModel,
    dataset: LabeledDataset,
    index: int,
    position: Sequence[int],
    epsilon: float,
) -> float:
    # a perturbed model may step outside the norm ball
    unconstrained = replace(model.architecture, norm_bound=None)

    def _shifted(step: float) -> float:
        weights = [np.array(w) for w in model.weights]
        weights[index][position] += step
        return cross_entropy_risk(MLPModel(unconstrained, tuple(weights)), dataset)

    return (_shifted(epsilon) - _shifted(-epsilon)) / (2.0 * epsilon)
