from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
import logging
import math
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .graph import PerronVector
from .model import (
    LabeledDataset,
    LogitFunction,
    MLPArchitecture,
    MLPModel,
    as_logit_function,
    augment_features,
    layer_activations,
    project_to_norm_ball,
)
from .training import backprop
from .util import derive_seed

EXHAUSTIVE_LIMIT = 20
_SIGN_CHUNK = 1 << 15

_logger = logging.getLogger("sml_sim.stats")

LikelihoodSampler = Callable[[int, int, int, int], np.ndarray]
"""``sampler(agent, label, n, seed)`` returns ``n`` feature rows drawn from ``L_k(h | label)``."""


def _as_columns(values: np.ndarray, count: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values.reshape(count, -1)


def empirical_training_mean(source: Union[MLPModel, LogitFunction], features: np.ndarray) -> Union[float, np.ndarray]:
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("training mean needs a nonempty list of feature rows")
    values = np.asarray(as_logit_function(source)(features), dtype=float)
    mean = values.mean(axis=0)
    return float(mean) if values.ndim == 1 else mean


@dataclass(frozen=True, eq=False)
class DebiasedStatistic:
    """Logit minus its training mean; one column per non-reference class."""

    agent: int
    function: LogitFunction
    training_means: np.ndarray
    classes: Tuple[int, ...]
    model: Optional[MLPModel] = None

    @property
    def components(self) -> int:
        return len(self.classes) - 1

    def raw(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        return _as_columns(self.function(features), features.shape[0])

    def evaluate(self, features: np.ndarray) -> np.ndarray:
        return self.raw(features) - self.training_means[np.newaxis, :]

    def __call__(self, h: np.ndarray) -> Union[float, np.ndarray]:
        row = self.evaluate(np.asarray(h, dtype=float).reshape(1, -1))[0]
        return float(row[0]) if self.components == 1 else row


def make_debiased_statistic(
    source: Union[MLPModel, LogitFunction],
    dataset: LabeledDataset,
    agent: int = 0,
    per_class: Optional[bool] = None,
) -> DebiasedStatistic:
    """Binary sets use the plain training mean; ``per_class`` averages each pairwise logit
    over the samples labelled with the reference class or with that class only."""
    if dataset.size == 0:
        raise ValueError(f"agent={agent} has an empty training set")
    if not dataset.balanced:
        _logger.warning("Unbalanced training set agent=%s counts=%s; debiasing with the plain mean", agent, dataset.class_counts)
    function = as_logit_function(source)
    values = _as_columns(function(dataset.features), dataset.size)
    components = len(dataset.classes) - 1
    if values.shape[1] != components:
        raise ValueError(f"logit has {values.shape[1]} components, class set needs {components}")
    if per_class is None:
        per_class = components > 1

    if not per_class:
        means = values.mean(axis=0)
    else:
        means = np.empty(components)
        reference = dataset.classes[0]
        for j, gamma in enumerate(dataset.classes[1:]):
            mask = (dataset.labels == reference) | (dataset.labels == gamma)
            if not np.any(mask):
                raise ValueError(f"agent={agent} has no training samples with labels in {{{reference}, {gamma}}}")
            means[j] = values[mask, j].mean()
    means.setflags(write=False)
    return DebiasedStatistic(
        agent=agent,
        function=function,
        training_means=means,
        classes=dataset.classes,
        model=source if isinstance(source, MLPModel) else None,
    )


def _mean_and_stderr(values: np.ndarray) -> Tuple[float, float]:
    if values.shape[0] < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.shape[0]))


@dataclass(frozen=True, eq=False)
class ConditionalMeans:
    plus: np.ndarray
    minus: np.ndarray
    training: np.ndarray
    plus_stderr: np.ndarray
    minus_stderr: np.ndarray
    perron: np.ndarray
    samples: int

    @property
    def network_plus(self) -> float:
        return float(self.perron @ self.plus)

    @property
    def network_minus(self) -> float:
        return float(self.perron @ self.minus)

    @property
    def network_mean(self) -> float:
        # uniform class priors
        return 0.5 * (self.network_plus + self.network_minus)

    @property
    def network_training(self) -> float:
        return float(self.perron @ self.training)

    @property
    def network_plus_stderr(self) -> float:
        return float(math.sqrt(np.sum((self.perron * self.plus_stderr) ** 2)))

    @property
    def network_minus_stderr(self) -> float:
        return float(math.sqrt(np.sum((self.perron * self.minus_stderr) ** 2)))

    def to_dict(self) -> dict:
        return {
            "plus": self.plus.tolist(),
            "minus": self.minus.tolist(),
            "training": self.training.tolist(),
            "plus_stderr": self.plus_stderr.tolist(),
            "minus_stderr": self.minus_stderr.tolist(),
            "perron": self.perron.tolist(),
            "network_plus": self.network_plus,
            "network_minus": self.network_minus,
            "network_mean": self.network_mean,
            "network_training": self.network_training,
            "samples": self.samples,
        }


def conditional_means(
    functions: Sequence[Union[DebiasedStatistic, MLPModel, LogitFunction]],
    sampler: LikelihoodSampler,
    perron: PerronVector,
    n_mc: int,
    seed: int,
    classes: Tuple[int, int] = (1, -1),
) -> ConditionalMeans:
    """Monte Carlo ``E[f_k(h) | class]`` per agent; debiased statistics contribute their
    training mean as the reference level, any other function uses 0."""
    if n_mc < 1:
        raise ValueError(f"n_mc must be at least 1, got {n_mc}")
    if len(functions) != perron.size:
        raise ValueError(f"{len(functions)} functions for {perron.size} agents")
    plus, minus, training, plus_se, minus_se = (np.zeros(perron.size) for _ in range(5))
    for agent, source in enumerate(functions):
        if isinstance(source, DebiasedStatistic):
            evaluate = source.function
            training[agent] = float(source.training_means[0])
        else:
            evaluate = as_logit_function(source)
        for label, target, errors in ((classes[0], plus, plus_se), (classes[1], minus, minus_se)):
            features = sampler(agent, label, n_mc, derive_seed(seed, "means", agent, label))
            values = np.asarray(evaluate(features), dtype=float).reshape(-1)
            target[agent], errors[agent] = _mean_and_stderr(values)
    _logger.debug("Conditional means plus=%s minus=%s training=%s", plus, minus, training)
    return ConditionalMeans(
        plus=plus,
        minus=minus,
        training=training,
        plus_stderr=plus_se,
        minus_stderr=minus_se,
        perron=np.array(perron.values),
        samples=n_mc,
    )


@dataclass(frozen=True, eq=False)
class ComplexityEstimate:
    per_agent: np.ndarray
    weights: np.ndarray
    method: str
    draws: int = 0
    standard_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        per_agent = np.asarray(self.per_agent, dtype=float).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if per_agent.shape != weights.shape:
            raise ValueError(f"{per_agent.shape[0]} complexities for {weights.shape[0]} weights")
        if np.any(per_agent < 0):
            raise ValueError("Rademacher complexities must be nonnegative")
        errors = np.asarray(self.standard_errors, dtype=float).reshape(-1)
        if errors.size == 0:
            errors = np.zeros_like(per_agent)
        object.__setattr__(self, "per_agent", per_agent)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "standard_errors", errors)

    @property
    def network(self) -> float:
        return float(self.weights @ self.per_agent)

    def to_dict(self) -> dict:
        return {
            "per_agent": self.per_agent.tolist(),
            "network": self.network,
            "method": self.method,
            "draws": self.draws,
            "standard_errors": self.standard_errors.tolist(),
        }


class FunctionFamily(ABC):
    @abstractmethod
    def candidate_values(self, features: np.ndarray, seed: int) -> np.ndarray:
        """Candidate outputs on ``features``, one row per candidate function."""

    def supremum(self, features: np.ndarray, signs: np.ndarray, seed: int) -> np.ndarray:
        values = self.candidate_values(features, seed)
        if values.shape[0] == 0:
            raise ValueError("function family has no candidates")
        return np.max(np.abs(signs @ values.T), axis=1) / features.shape[0]


class FiniteFamily(FunctionFamily):
    def __init__(self, functions: Sequence[Union[MLPModel, LogitFunction]]) -> None:
        if not functions:
            raise ValueError("finite family is empty")
        self._functions = [as_logit_function(f) for f in functions]

    def candidate_values(self, features: np.ndarray, seed: int) -> np.ndarray:
        return np.vstack([np.asarray(f(features), dtype=float).reshape(1, -1) for f in self._functions])


class LinearFamily(FunctionFamily):
    """``f(h) = w . h`` with ``||w||_1 <= bound``; candidates are random points of the ball
    plus its ``2d`` vertices, where every linear supremum is attained."""

    def __init__(self, dim: int, bound: float, interior_samples: int = 0) -> None:
        if dim < 1 or bound <= 0:
            raise ValueError(f"linear family needs dim >= 1 and bound > 0, got dim={dim} bound={bound}")
        self._dim = dim
        self._bound = bound
        self._interior = interior_samples

    def candidate_weights(self, seed: int) -> np.ndarray:
        vertices = self._bound * np.vstack([np.eye(self._dim), -np.eye(self._dim)])
        if self._interior == 0:
            return vertices
        rng = np.random.default_rng(seed)
        directions = rng.laplace(size=(self._interior, self._dim))
        directions /= np.maximum(np.sum(np.abs(directions), axis=1, keepdims=True), 1e-300)
        radii = self._bound * rng.random((self._interior, 1)) ** (1.0 / self._dim)
        return np.vstack([vertices, directions * radii])

    def candidate_values(self, features: np.ndarray, seed: int) -> np.ndarray:
        if features.shape[1] != self._dim:
            raise ValueError(f"features have dim={features.shape[1]}, family expects {self._dim}")
        return self.candidate_weights(seed) @ features.T


class MLPFamily(FunctionFamily):
    """Binary-logit MLPs inside the architecture's norm ball, refined by projected ascent."""

    def __init__(
        self,
        arch: MLPArchitecture,
        candidates: int = 32,
        ascent_steps: int = 0,
        ascent_rate: float = 0.1,
    ) -> None:
        if arch.norm_bound is None:
            raise ValueError("MLP family needs a norm bound")
        if arch.num_classes != 2:
            raise ValueError("MLP family covers binary logits only")
        if candidates < 1:
            raise ValueError("MLP family needs at least one candidate")
        self._arch = arch
        self._count = candidates
        self._steps = ascent_steps
        self._rate = ascent_rate

    def models(self, seed: int) -> List[MLPModel]:
        rng = np.random.default_rng(seed)
        bound = self._arch.norm_bound
        result = []
        for _ in range(self._count):
            weights = tuple(
                project_to_norm_ball(rng.uniform(-bound, bound, size=(n_out, n_in)), bound)
                for n_in, n_out in zip(self._arch.layer_sizes[:-1], self._arch.layer_sizes[1:])
            )
            result.append(MLPModel(self._arch, weights))
        return result

    def candidate_values(self, features: np.ndarray, seed: int) -> np.ndarray:
        return np.vstack([as_logit_function(m)(features).reshape(1, -1) for m in self.models(seed)])

    def supremum(self, features: np.ndarray, signs: np.ndarray, seed: int) -> np.ndarray:
        models = self.models(seed)
        values = np.vstack([as_logit_function(m)(features).reshape(1, -1) for m in models])
        correlations = signs @ values.T
        best = np.max(np.abs(correlations), axis=1) / features.shape[0]
        if self._steps == 0:
            return best
        inputs = augment_features(self._arch, features)
        for draw, row in enumerate(signs):
            start = models[int(np.argmax(np.abs(correlations[draw])))]
            best[draw] = max(best[draw], self._ascend(start, inputs, row))
        return best

    def _ascend(self, model: MLPModel, inputs: np.ndarray, signs: np.ndarray) -> float:
        count = inputs.shape[0]
        bound = self._arch.norm_bound
        best = 0.0
        for _ in range(self._steps + 1):
            pre, _ = layer_activations(model, inputs)
            logits = pre[-1][:, 0] - pre[-1][:, 1]
            total = float(signs @ logits) / count
            best = max(best, abs(total))
            direction = 1.0 if total >= 0 else -1.0
            output_grad = np.outer(direction * signs / count, [1.0, -1.0])
            grads = backprop(model, inputs, output_grad)
            model = model.with_weights(
                [project_to_norm_ball(w + self._rate * g, bound) for w, g in zip(model.weights, grads)]
            )
        return best


def _sign_blocks(count: int) -> Iterator[np.ndarray]:
    total = 1 << count
    powers = 1 << np.arange(count - 1, -1, -1)
    for start in range(0, total, _SIGN_CHUNK):
        codes = np.arange(start, min(start + _SIGN_CHUNK, total))
        bits = (codes[:, np.newaxis] & powers[np.newaxis, :]) > 0
        yield np.where(bits, 1.0, -1.0)


def rademacher_monte_carlo(
    family: FunctionFamily,
    features: np.ndarray,
    draws: int,
    seed: int,
    exhaustive: bool = False,
) -> ComplexityEstimate:
    """Lower approximation of ``E_r sup_f |(1/N) sum r_n f(h_n)|`` for a single agent.

    ``exhaustive`` averages over all ``2^N`` sign vectors instead of ``draws`` random ones.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("Rademacher estimate needs a nonempty feature matrix")
    count = features.shape[0]
    candidate_seed = derive_seed(seed, "candidates")
    if exhaustive:
        if count > EXHAUSTIVE_LIMIT:
            raise ValueError(f"exhaustive enumeration limited to N <= {EXHAUSTIVE_LIMIT}, got N={count}")
        total = 0.0
        for block in _sign_blocks(count):
            total += float(np.sum(family.supremum(features, block, candidate_seed)))
        value = total / (1 << count)
        return ComplexityEstimate([value], [1.0], method="exhaustive", draws=1 << count)

    if draws < 1:
        raise ValueError(f"draws must be at least 1, got {draws}")
    rng = np.random.default_rng(derive_seed(seed, "signs"))
    signs = rng.choice(np.array([-1.0, 1.0]), size=(draws, count))
    sups = family.supremum(features, signs, candidate_seed)
    value, stderr = _mean_and_stderr(sups)
    _logger.debug("Rademacher estimate value=%s stderr=%s draws=%s samples=%s", value, stderr, draws, count)
    return ComplexityEstimate([value], [1.0], method="monte-carlo", draws=draws, standard_errors=[stderr])


def network_complexity(estimates: Sequence[ComplexityEstimate], perron: PerronVector) -> ComplexityEstimate:
    if len(estimates) != perron.size:
        raise ValueError(f"{len(estimates)} agent estimates for {perron.size} agents")
    methods = {e.method for e in estimates}
    return ComplexityEstimate(
        per_agent=[e.network for e in estimates],
        weights=np.array(perron.values),
        method=methods.pop() if len(methods) == 1 else "mixed",
        draws=min(e.draws for e in estimates),
        standard_errors=[float(e.standard_errors[0]) if e.standard_errors.size else 0.0 for e in estimates],
    )


def _require_bounds(arch: MLPArchitecture) -> Tuple[float, float]:
    if arch.norm_bound is None or arch.input_bound is None:
        raise ValueError("norm_bound and input_bound must both be set for the MLP complexity bound")
    return arch.norm_bound, arch.input_bound


def mlp_complexity_constant(arch: MLPArchitecture) -> float:
    b, c = _require_bounds(arch)
    return 4.0 * (2.0 * b * arch.lipschitz) ** (arch.depth - 1) * b * c * math.sqrt(math.log(2 * arch.input_dim))


def mlp_rademacher_bound(arch: MLPArchitecture, samples: int) -> float:
    if samples < 1:
        raise ValueError(f"sample count must be positive, got {samples}")
    return mlp_complexity_constant(arch) / math.sqrt(samples)


def analytic_logit_bound(arch: MLPArchitecture) -> float:
    b, c = _require_bounds(arch)
    return 2.0 * (b * arch.lipschitz) ** (arch.depth - 1) * b * c * arch.input_dim


def empirical_logit_bound(source: Union[MLPModel, LogitFunction], features: np.ndarray) -> float:
    values = np.asarray(as_logit_function(source)(np.atleast_2d(features)), dtype=float)
    if values.size == 0:
        raise ValueError("empirical logit bound needs at least one feature row")
    return float(np.max(np.abs(values)))

