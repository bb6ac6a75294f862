from __future__ import annotations

from dataclasses import dataclass
import json
import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import MultiViewDataset
from .model import LabeledDataset, LogitFunction, MLPArchitecture, MLPModel, TrainingHyperparameters, as_logit_function
from .training import train_erm

ERROR_CLAMP = 1e-10

_logger = logging.getLogger("sml_sim.baselines")

WeakLearner = Callable[[LabeledDataset, np.ndarray, int], Union[MLPModel, LogitFunction]]
"""``learner(agent_dataset, sample_weights, agent)`` returns the agent's trained logit."""


@dataclass(frozen=True, eq=False)
class BoostedEnsemble:
    functions: Tuple[LogitFunction, ...]
    weights: np.ndarray
    errors: np.ndarray
    clamped: Tuple[bool, ...]
    weight_history: Tuple[np.ndarray, ...]
    models: Tuple[Optional[MLPModel], ...] = ()

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (len(self.functions),) or not np.all(np.isfinite(weights)):
            raise ValueError("boosting weights must be finite, one per agent")
        object.__setattr__(self, "weights", weights)

    @property
    def agents(self) -> int:
        return len(self.functions)

    def to_dict(self, model_paths: Sequence[Optional[str]] = ()) -> dict:
        return {
            "weights": self.weights.tolist(),
            "errors": self.errors.tolist(),
            "clamped": list(self.clamped),
            "models": list(model_paths),
        }


def hard_decisions(values: np.ndarray) -> np.ndarray:
    # sign with sign(0) = +1
    return np.where(np.asarray(values, dtype=float) >= 0, 1, -1)


def boosting_weight(error: float) -> Tuple[float, float, bool]:
    clamped_error = min(max(error, ERROR_CLAMP), 1.0 - ERROR_CLAMP)
    was_clamped = clamped_error != error
    return 0.5 * math.log((1.0 - clamped_error) / clamped_error), clamped_error, was_clamped


def mlp_learner(
    architectures: Sequence[MLPArchitecture],
    hyperparameters: Sequence[TrainingHyperparameters],
) -> WeakLearner:
    def _train(dataset: LabeledDataset, sample_weights: np.ndarray, agent: int) -> MLPModel:
        return train_erm(dataset, architectures[agent], hyperparameters[agent], sample_weights=sample_weights).model

    return _train


def adaboost_train(
    dataset: MultiViewDataset,
    architectures: Optional[Sequence[MLPArchitecture]] = None,
    hyperparameters: Optional[Sequence[TrainingHyperparameters]] = None,
    learner: Optional[WeakLearner] = None,
) -> BoostedEnsemble:
    """Sequential rounds in ascending agent order, each training on its own view under the
    current sample weights."""
    if len(dataset.classes) != 2:
        raise ValueError(f"boosting baseline is binary only, got classes={dataset.classes}")
    if dataset.size == 0:
        raise ValueError("boosting needs a nonempty common sample")
    if learner is None:
        if architectures is None or hyperparameters is None:
            raise ValueError("either a learner or per-agent architectures and hyperparameters are required")
        learner = mlp_learner(architectures, hyperparameters)

    signed = np.where(dataset.labels == dataset.classes[0], 1, -1)
    sample_weights = np.full(dataset.size, 1.0 / dataset.size)
    history: List[np.ndarray] = [sample_weights.copy()]
    functions: List[LogitFunction] = []
    models: List[Optional[MLPModel]] = []
    weights: List[float] = []
    errors: List[float] = []
    clamped: List[bool] = []
    for agent in range(dataset.num_agents):
        agent_data = dataset.agent_dataset(agent)
        trained = learner(agent_data, sample_weights.copy(), agent)
        function = as_logit_function(trained)
        votes = hard_decisions(function(agent_data.features))
        error = float(np.sum(sample_weights[votes != signed]))
        weight, used_error, was_clamped = boosting_weight(error)
        if was_clamped:
            _logger.warning("Boosting error clamped agent=%s error=%s used=%s", agent, error, used_error)
        sample_weights = sample_weights * np.exp(-weight * signed * votes)
        sample_weights /= sample_weights.sum()
        history.append(sample_weights.copy())
        functions.append(function)
        models.append(trained if isinstance(trained, MLPModel) else None)
        weights.append(weight)
        errors.append(error)
        clamped.append(was_clamped)
        _logger.info("Boosting round agent=%s weighted_error=%s weight=%s", agent, error, weight)

    return BoostedEnsemble(
        functions=tuple(functions),
        weights=np.array(weights),
        errors=np.array(errors),
        clamped=tuple(clamped),
        weight_history=tuple(history),
        models=tuple(models),
    )


def adaboost_votes(ensemble: BoostedEnsemble, features: Sequence[np.ndarray]) -> np.ndarray:
    if len(features) != ensemble.agents:
        raise ValueError(f"{len(features)} feature views for {ensemble.agents} agents")
    columns = [hard_decisions(f(np.atleast_2d(h))) for f, h in zip(ensemble.functions, features)]
    return np.column_stack(columns)


def adaboost_decide(ensemble: BoostedEnsemble, features: Sequence[np.ndarray]) -> Union[int, np.ndarray]:
    """``sign(sum_k a_k sign(f_k(h_k)))`` per time step; a single observation per agent gives an int."""
    single = all(np.asarray(h).ndim == 1 for h in features)
    decisions = hard_decisions(adaboost_votes(ensemble, features) @ ensemble.weights)
    return int(decisions[0]) if single else decisions


def save_ensemble(ensemble: BoostedEnsemble, path: str, model_paths: Sequence[Optional[str]] = ()) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(ensemble.to_dict(model_paths), handle, indent=2)

