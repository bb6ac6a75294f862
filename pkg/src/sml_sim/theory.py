from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq

from .graph import PerronVector

LOG2 = math.log(2.0)
# linear fit of 4 * E(R) over [0, log 2)
EXPONENT_SLOPE_CONSTANT = 0.2812
ROOT_TOLERANCE = 1e-14

_logger = logging.getLogger("sml_sim.theory")


def _check_target_risk(target_risk: float) -> None:
    if not 0.0 <= target_risk < LOG2:
        raise ValueError(f"target risk must lie in [0, log 2), got {target_risk}")


def exponent_root(target_risk: float) -> float:
    """Unique root ``y > 1`` of ``e^R y^3 - y - 1``."""
    _check_target_risk(target_risk)
    scale = math.exp(target_risk)
    return brentq(lambda y: scale * y**3 - y - 1.0, 1.0, 2.0, xtol=ROOT_TOLERANCE, rtol=4 * np.finfo(float).eps)


def exact_exponent(target_risk: float) -> float:
    return 0.25 * math.log(exponent_root(target_risk))


def approx_exponent(target_risk: float) -> float:
    """Linear approximation of ``4 * exact_exponent``."""
    if not 0.0 <= target_risk <= LOG2:
        raise ValueError(f"target risk must lie in [0, log 2], got {target_risk}")
    return EXPONENT_SLOPE_CONSTANT * (1.0 - target_risk / LOG2)


def exponent_curve(points: int, upper_fraction: float = 1.0) -> List[Tuple[float, float, float]]:
    """``(R, exact E(R), approx/4)`` on an even grid of ``[0, upper_fraction * log 2)``."""
    if points < 1:
        raise ValueError(f"grid needs at least one point, got {points}")
    grid = np.linspace(0.0, upper_fraction * LOG2, points, endpoint=upper_fraction < 1.0)
    return [(float(r), exact_exponent(float(r)), approx_exponent(float(r)) / 4.0) for r in grid]


@dataclass(frozen=True, eq=False)
class TrainingProfile:
    counts: np.ndarray
    perron: np.ndarray

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=int).reshape(-1)
        perron = np.array(self.perron, dtype=float).reshape(-1)
        if counts.size == 0 or np.any(counts < 1):
            raise ValueError(f"training counts must be positive, got {counts.tolist()}")
        if counts.shape != perron.shape:
            raise ValueError(f"{counts.size} training counts for {perron.size} Perron weights")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "perron", perron)

    @classmethod
    def uniform(cls, count: int, perron: PerronVector) -> "TrainingProfile":
        return cls(np.full(perron.size, count), np.array(perron.values))

    @property
    def n_max(self) -> int:
        return int(self.counts.max())

    @property
    def penalties(self) -> np.ndarray:
        return self.n_max / self.counts

    @property
    def alpha(self) -> float:
        if np.all(self.counts == self.counts[0]):
            return 1.0
        # penalties are >= 1, so only round-off can take the average below 1
        return max(1.0, float(self.perron @ self.penalties))

    @property
    def alpha_from_inverse_counts(self) -> float:
        return float(self.n_max * np.sum(self.perron / self.counts))

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "n_max": self.n_max,
            "penalties": self.penalties.tolist(),
            "alpha": self.alpha,
        }


@dataclass(frozen=True, eq=False)
class BoundInputs:
    target_risk: float
    beta: Union[float, np.ndarray]
    rho: float
    profile: TrainingProfile

    def __post_init__(self) -> None:
        _check_target_risk(self.target_risk)
        if self.rho < 0:
            raise ValueError(f"Rademacher complexity must be nonnegative, got {self.rho}")
        beta = np.asarray(self.beta, dtype=float)
        if np.any(beta <= 0):
            raise ValueError(f"class bound beta must be positive, got {beta.tolist()}")
        if beta.ndim > 0 and beta.shape != self.profile.counts.shape:
            raise ValueError(f"{beta.size} per-agent bounds for {self.profile.counts.size} agents")

    @property
    def alpha_beta(self) -> float:
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim == 0:
            return self.profile.alpha * float(beta)
        return float(self.profile.perron @ (self.profile.penalties * beta))


class BoundResult(NamedTuple):
    value: float
    raw: float
    vacuous: bool
    exponent: float
    rho: float
    n_max: int
    alpha_beta: float

    def to_dict(self) -> dict:
        return dict(self._asdict())


def bound_value(n_max: int, exponent: float, rho: float, alpha_beta: float) -> BoundResult:
    if n_max < 1:
        raise ValueError(f"N_max must be at least 1, got {n_max}")
    if alpha_beta <= 0:
        raise ValueError(f"alpha * beta must be positive, got {alpha_beta}")
    raw = 1.0 - 2.0 * math.exp(-8.0 * n_max * (exponent - rho) ** 2 / alpha_beta**2)
    vacuous = rho >= exponent or raw <= 0.0
    value = 0.0 if vacuous else raw
    return BoundResult(value, raw, vacuous, exponent, rho, n_max, alpha_beta)


def pc_lower_bound(inputs: BoundInputs) -> BoundResult:
    result = bound_value(inputs.profile.n_max, exact_exponent(inputs.target_risk), inputs.rho, inputs.alpha_beta)
    if result.vacuous:
        _logger.info("Consistency bound vacuous rho=%s exponent=%s raw=%s", result.rho, result.exponent, result.raw)
    return result


def network_complexity_bound(constants: Sequence[float], profile: TrainingProfile) -> Tuple[float, float]:
    constants = np.asarray(constants, dtype=float)
    if constants.shape != profile.counts.shape:
        raise ValueError(f"{constants.size} constants for {profile.counts.size} agents")
    if np.any(constants < 0):
        raise ValueError("complexity constants must be nonnegative")
    network_constant = float(profile.perron @ (constants * np.sqrt(profile.penalties)))
    return network_constant / math.sqrt(profile.n_max), network_constant


def _check_sample_complexity_inputs(constant: float, target_risk: float, alpha: float, beta: float, epsilon: float) -> None:
    _check_target_risk(target_risk)
    if constant <= 0:
        raise ValueError(f"complexity constant must be positive, got {constant}")
    if alpha < 1:
        raise ValueError(f"imbalance penalty must be at least 1, got {alpha}")
    if beta <= 0:
        raise ValueError(f"class bound must be positive, got {beta}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")


def sample_complexity(constant: float, target_risk: float, alpha: float, beta: float, epsilon: float) -> int:
    _check_sample_complexity_inputs(constant, target_risk, alpha, beta, epsilon)
    exponent = exact_exponent(target_risk)
    spread = 1.0 + (alpha * beta / (2.0 * constant)) * math.sqrt(0.5 * math.log(2.0 / epsilon))
    return int(math.floor((constant / exponent) ** 2 * spread**2)) + 1


class SelfConsistency(NamedTuple):
    passed: bool
    skipped: bool
    n_max: int
    bound: Optional[BoundResult]


def self_consistency_check(
    constant: float,
    target_risk: float,
    alpha: float,
    beta: float,
    epsilon: float,
    n_max: Optional[int] = None,
) -> SelfConsistency:
    """Plug ``rho = C / sqrt(N)`` into the consistency bound at ``N = sample_complexity(...)``
    (or at an explicit ``n_max``) and check it reaches ``1 - epsilon``."""
    if n_max is None:
        n_max = sample_complexity(constant, target_risk, alpha, beta, epsilon)
    else:
        _check_sample_complexity_inputs(constant, target_risk, alpha, beta, epsilon)
    exponent = exact_exponent(target_risk)
    rho = constant / math.sqrt(n_max)
    if rho >= exponent:
        return SelfConsistency(passed=False, skipped=True, n_max=n_max, bound=None)
    result = bound_value(n_max, exponent, rho, alpha * beta)
    return SelfConsistency(passed=result.value >= 1.0 - epsilon, skipped=False, n_max=n_max, bound=result)
