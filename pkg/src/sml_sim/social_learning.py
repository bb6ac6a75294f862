from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
import logging
from typing import TYPE_CHECKING, Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .graph import CombinationMatrix
from .model import BINARY_CLASSES, LogitFunction, MLPModel, as_logit_function
from .stats import ConditionalMeans, DebiasedStatistic

if TYPE_CHECKING:
    from .data import GaussianSceneSpec, PredictionStream

ENGINES = ("sl", "asl")

_logger = logging.getLogger("sml_sim.social_learning")


@dataclass(frozen=True)
class RegimeSchedule:
    """Contiguous ``(start, state)`` segments; the last one runs to the end of any stream."""

    segments: Tuple[Tuple[int, int], ...]

    def __post_init__(self) -> None:
        segments = tuple((int(start), int(state)) for start, state in self.segments)
        if not segments:
            raise ValueError("schedule needs at least one segment")
        if segments[0][0] != 0:
            raise ValueError(f"schedule must start at i=0, first segment starts at {segments[0][0]}")
        starts = [start for start, _ in segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"segment starts must be strictly increasing, got {starts}")
        object.__setattr__(self, "segments", segments)

    @classmethod
    def constant(cls, state: int) -> "RegimeSchedule":
        return cls(((0, state),))

    @classmethod
    def cycle(cls, states: Sequence[int], period: int, length: int) -> "RegimeSchedule":
        """Visit ``states`` in order, switching every ``period`` steps, until ``length``."""
        if period < 1 or not states:
            raise ValueError(f"cycle needs period >= 1 and at least one state, got period={period}")
        segments = [(start, states[(start // period) % len(states)]) for start in range(0, max(length, 1), period)]
        return cls(tuple(segments))

    def state_at(self, i: int) -> int:
        current = self.segments[0][1]
        for start, state in self.segments:
            if start > i:
                break
            current = state
        return current

    def states(self, length: int) -> np.ndarray:
        if length < 0:
            raise ValueError(f"stream length must be nonnegative, got {length}")
        track = np.empty(length, dtype=int)
        bounds = [start for start, _ in self.segments[1:]] + [length]
        for (start, state), end in zip(self.segments, bounds):
            track[min(start, length):min(end, length)] = state
        return track

    def switch_points(self, length: int) -> List[int]:
        return [start for start, _ in self.segments[1:] if start < length]

    def validate(self, classes: Sequence[int]) -> None:
        unknown = sorted({state for _, state in self.segments} - set(classes))
        if unknown:
            raise ValueError(f"schedule states {unknown} are not in the class set {tuple(classes)}")

    def to_dict(self) -> dict:
        return {"segments": [list(segment) for segment in self.segments]}


@dataclass(frozen=True, eq=False)
class BeliefState:
    """Log-belief ratios ``lambda[k, j] = log phi_k(classes[0]) / phi_k(classes[j+1])`` at time ``time``."""

    values: np.ndarray
    time: int = 0

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, np.newaxis]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"belief state must be (agents, components), got shape={values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"belief state became non-finite at time={self.time}")
        if self.time < 0:
            raise ValueError(f"time index must be nonnegative, got {self.time}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def initial(cls, agents: int, components: int = 1) -> "BeliefState":
        return cls(np.zeros((agents, components)), 0)

    @property
    def agents(self) -> int:
        return self.values.shape[0]

    @property
    def components(self) -> int:
        return self.values.shape[1]


def _check_statistics(state: BeliefState, matrix: CombinationMatrix, stats: np.ndarray) -> np.ndarray:
    stats = np.asarray(stats, dtype=float)
    if stats.ndim == 1:
        stats = stats[:, np.newaxis]
    if matrix.size != state.agents:
        raise ValueError(f"matrix has {matrix.size} agents, state has {state.agents}")
    if stats.shape != state.values.shape:
        raise ValueError(f"statistics have shape {stats.shape}, state has {state.values.shape}")
    if np.any(np.isnan(stats)):
        raise ValueError(f"NaN statistic at time={state.time + 1}")
    return stats


def sl_step(state: BeliefState, matrix: CombinationMatrix, stats: np.ndarray) -> BeliefState:
    stats = _check_statistics(state, matrix, stats)
    return BeliefState(matrix.combine(state.values + stats), state.time + 1)


def _check_step_size(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"adaptive step size must lie in (0, 1), got delta={delta}")


def asl_step(state: BeliefState, matrix: CombinationMatrix, stats: np.ndarray, delta: float) -> BeliefState:
    _check_step_size(delta)
    stats = _check_statistics(state, matrix, stats)
    return BeliefState(matrix.combine((1.0 - delta) * state.values + stats), state.time + 1)


def _log_scores(values: np.ndarray) -> np.ndarray:
    # log phi up to a constant: 0 for the reference class, -lambda for the rest
    values = np.atleast_2d(values)
    return np.hstack([np.zeros((values.shape[0], 1)), -values])


def beliefs_from_lambda(values: Union[float, Sequence[float], np.ndarray]) -> np.ndarray:
    scores = _log_scores(np.asarray(values, dtype=float).reshape(1, -1))[0]
    return np.exp(scores - logsumexp(scores))


def decide(state: BeliefState, classes: Sequence[int] = BINARY_CLASSES) -> np.ndarray:
    """Per-agent labels; ``lambda = 0`` picks the reference class and ties go to the lowest index."""
    if len(classes) != state.components + 1:
        raise ValueError(f"{len(classes)} classes for {state.components} belief components")
    return np.asarray(classes)[np.argmax(_log_scores(state.values), axis=1)]


class StatisticProvider(ABC):
    source: str = ""

    @property
    @abstractmethod
    def agents(self) -> int:
        ...

    @abstractmethod
    def values(self, agent: int, features: np.ndarray) -> np.ndarray:
        """``(N, C)`` statistics for ``N`` observations of one agent."""

    def stream_statistics(self, stream: "PredictionStream") -> np.ndarray:
        if stream.num_agents != self.agents:
            raise ValueError(f"stream has {stream.num_agents} agents, provider covers {self.agents}")
        if stream.length == 0:
            return np.zeros((0, self.agents, self.components))
        columns = [np.asarray(self.values(k, stream.views[k]), dtype=float).reshape(stream.length, -1)
                   for k in range(self.agents)]
        stats = np.stack(columns, axis=1)
        if not np.all(np.isfinite(stats)):
            raise ValueError(f"provider source={self.source} produced non-finite statistics")
        return stats

    @property
    def components(self) -> int:
        return 1


class DebiasedProvider(StatisticProvider):
    source = "trained-debiased"

    def __init__(self, statistics: Sequence[DebiasedStatistic]) -> None:
        if not statistics:
            raise ValueError("provider needs at least one statistic")
        self._statistics = list(statistics)

    @property
    def agents(self) -> int:
        return len(self._statistics)

    @property
    def components(self) -> int:
        return self._statistics[0].components

    def values(self, agent: int, features: np.ndarray) -> np.ndarray:
        return self._statistics[agent].evaluate(features)


class GaussianLikelihoodProvider(StatisticProvider):
    source = "true-log-likelihood-ratio"

    def __init__(self, scene: "GaussianSceneSpec") -> None:
        self._scene = scene

    @property
    def agents(self) -> int:
        return self._scene.num_agents

    @property
    def components(self) -> int:
        return len(self._scene.classes) - 1

    def values(self, agent: int, features: np.ndarray) -> np.ndarray:
        return np.asarray(self._scene.log_likelihood_ratio(agent, features)).reshape(np.atleast_2d(features).shape[0], -1)


class FixedFunctionProvider(StatisticProvider):
    source = "fixed-function"

    def __init__(self, functions: Sequence[Union[MLPModel, LogitFunction]], components: int = 1) -> None:
        if not functions:
            raise ValueError("provider needs at least one function")
        self._functions = [as_logit_function(f) for f in functions]
        self._components = components

    @classmethod
    def constant(cls, values: Sequence[float]) -> "FixedFunctionProvider":
        def _constant(value: float) -> LogitFunction:
            return lambda features: np.full(np.atleast_2d(features).shape[0], float(value))

        return cls([_constant(v) for v in values])

    @property
    def agents(self) -> int:
        return len(self._functions)

    @property
    def components(self) -> int:
        return self._components

    def values(self, agent: int, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        return np.asarray(self._functions[agent](features), dtype=float).reshape(features.shape[0], -1)


@dataclass(frozen=True, eq=False)
class PredictionResult:
    engine: str
    delta: Optional[float]
    classes: Tuple[int, ...]
    lambdas: np.ndarray
    decisions: np.ndarray
    states: np.ndarray

    @property
    def length(self) -> int:
        return self.states.shape[0]

    @property
    def correct(self) -> np.ndarray:
        return self.decisions == self.states[:, np.newaxis]

    @property
    def error_rate(self) -> np.ndarray:
        """Fraction of agents deciding wrongly at every step."""
        return 1.0 - self.correct.mean(axis=1) if self.length else np.zeros(0)


def run_prediction(
    engine: str,
    matrix: CombinationMatrix,
    provider: StatisticProvider,
    stream: "PredictionStream",
    delta: Optional[float] = None,
    classes: Sequence[int] = BINARY_CLASSES,
    initial: Optional[BeliefState] = None,
) -> PredictionResult:
    if engine not in ENGINES:
        raise ValueError(f"unknown engine={engine!r}; expected one of {ENGINES}")
    if engine == "sl" and delta is not None:
        raise ValueError("delta applies to the adaptive engine only")
    if engine == "asl":
        if delta is None:
            raise ValueError("adaptive engine needs a step size delta")
        _check_step_size(delta)
    classes = tuple(classes)
    unknown = sorted(set(stream.states.tolist()) - set(classes))
    if unknown:
        raise ValueError(f"stream states {unknown} are not in the class set {classes}")
    if provider.components != len(classes) - 1:
        raise ValueError(f"provider has {provider.components} components for {len(classes)} classes")

    stats = provider.stream_statistics(stream)
    state = initial if initial is not None else BeliefState.initial(matrix.size, provider.components)
    lambdas = np.empty((stream.length, matrix.size, provider.components))
    decisions = np.empty((stream.length, matrix.size), dtype=int)
    for i in range(stream.length):
        if engine == "sl":
            state = sl_step(state, matrix, stats[i])
        else:
            state = asl_step(state, matrix, stats[i], delta)
        lambdas[i] = state.values
        decisions[i] = decide(state, classes)
    _logger.debug("Prediction engine=%s delta=%s steps=%s source=%s", engine, delta, stream.length, provider.source)
    return PredictionResult(engine, delta, classes, lambdas, decisions, np.array(stream.states))


class TrajectoryRow(NamedTuple):
    run_id: int
    i: int
    agent: int
    component: int
    value: float
    decision: int
    true_state: int
    correct: bool


def trajectory_rows(result: PredictionResult, run_id: int = 0) -> Iterator[TrajectoryRow]:
    """One row per (step, agent, component); ``component`` is the non-reference class (binary: ``classes[1]``)."""
    correct = result.correct
    for i in range(result.length):
        for agent in range(result.lambdas.shape[1]):
            for j in range(result.lambdas.shape[2]):
                yield TrajectoryRow(
                    run_id,
                    i + 1,
                    agent,
                    result.classes[j + 1],
                    float(result.lambdas[i, agent, j]),
                    int(result.decisions[i, agent]),
                    int(result.states[i]),
                    bool(correct[i, agent]),
                )


def adaptation_times(result: PredictionResult, switch_points: Sequence[int]) -> List[Optional[int]]:
    """Steps after each switch until every agent decides correctly and keeps doing so until the next switch."""
    correct_all = result.correct.all(axis=1)
    bounds = list(switch_points[1:]) + [result.length]
    times: List[Optional[int]] = []
    for start, end in zip(switch_points, bounds):
        window = correct_all[start:end]
        wrong = np.flatnonzero(~window)
        if wrong.size == 0:
            times.append(0)
        elif wrong[-1] == window.size - 1:
            times.append(None)
        else:
            times.append(int(wrong[-1]) + 1)
    return times


class ConsistencyReport(NamedTuple):
    margin_plus: float
    margin_minus: float
    condition_plus: bool
    condition_minus: bool

    @property
    def satisfied(self) -> bool:
        return self.condition_plus and self.condition_minus

    def to_dict(self) -> dict:
        return {
            "margin_plus": self.margin_plus,
            "margin_minus": self.margin_minus,
            "condition_plus": self.condition_plus,
            "condition_minus": self.condition_minus,
            "satisfied": self.satisfied,
        }


def check_consistency_conditions(means: ConditionalMeans) -> ConsistencyReport:
    """Network means of the statistic must sit above the training mean under the reference
    class and below it otherwise; true ratios have training mean 0."""
    margin_plus = means.network_plus - means.network_training
    margin_minus = means.network_minus - means.network_training
    return ConsistencyReport(margin_plus, margin_minus, margin_plus > 0, margin_minus < 0)


LogDensity = Callable[[np.ndarray], np.ndarray]


def bayes_classifier(
    log_density_plus: LogDensity,
    log_density_minus: LogDensity,
    features: np.ndarray,
    priors: Tuple[float, float] = (0.5, 0.5),
) -> np.ndarray:
    """Single-agent decisions from the running log-likelihood ratio plus the log prior ratio."""
    if len(priors) != 2 or min(priors) <= 0:
        raise ValueError(f"priors must be two positive probabilities, got {priors}")
    features = np.atleast_2d(features)
    if features.shape[0] == 0:
        return np.empty(0, dtype=int)
    plus = np.asarray(log_density_plus(features), dtype=float).reshape(-1)
    minus = np.asarray(log_density_minus(features), dtype=float).reshape(-1)
    if np.any(np.isneginf(plus)) or np.any(np.isneginf(minus)):
        raise ValueError("feature with zero likelihood under one of the classes")
    statistic = np.log(priors[0] / priors[1]) + np.cumsum(plus - minus)
    return np.where(statistic >= 0, 1, -1)
