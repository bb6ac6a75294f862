from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sml_sim.graph import PerronVector
from sml_sim.theory import (
    LOG2,
    BoundInputs,
    TrainingProfile,
    approx_exponent,
    bound_value,
    exact_exponent,
    exponent_curve,
    exponent_root,
    network_complexity_bound,
    pc_lower_bound,
    sample_complexity,
    self_consistency_check,
)

PLASTIC_NUMBER = 1.324717957244746


def _cardano_root(target_risk: float) -> float:
    # y^3 + p y + q = 0 with p = q = -exp(-R); one real root for R >= 0
    p = q = -math.exp(-target_risk)
    disc = math.sqrt((q / 2) ** 2 + (p / 3) ** 3)
    return float(np.cbrt(-q / 2 + disc) + np.cbrt(-q / 2 - disc))


def test_zero_risk_exponent_matches_known_constant():
    assert math.isclose(exponent_root(0.0), PLASTIC_NUMBER, rel_tol=1e-12)
    assert abs(4 * exact_exponent(0.0) - 0.2812) < 1e-4
    assert approx_exponent(0.0) == 0.2812


def test_root_solves_cubic_across_grid():
    for risk in np.linspace(0.0, LOG2, 100, endpoint=False):
        y = exponent_root(float(risk))
        assert y > 1.0
        assert abs(math.exp(risk) * y**3 - y - 1.0) < 1e-12


def test_root_agrees_with_radicals():
    for risk in (0.0, 0.1, 0.35, 0.6, 0.69):
        assert math.isclose(exponent_root(risk), _cardano_root(risk), rel_tol=1e-10)


def test_linear_approximation_stays_close():
    scale = exact_exponent(0.0)
    for risk in np.linspace(0.0, 0.95 * LOG2, 60):
        assert abs(approx_exponent(float(risk)) / 4 - exact_exponent(float(risk))) <= 0.02 * scale


def test_exponent_rejects_risk_outside_range():
    with pytest.raises(ValueError, match="target risk"):
        exact_exponent(LOG2)
    with pytest.raises(ValueError):
        exact_exponent(-0.01)
    assert approx_exponent(LOG2) == 0.0


def test_exponent_curve_is_decreasing():
    curve = exponent_curve(50)
    assert len(curve) == 50
    assert curve[0][0] == 0.0 and curve[-1][0] < LOG2
    exact = [row[1] for row in curve]
    assert all(b < a for a, b in zip(exact, exact[1:]))
    assert all(row[1] > 0 for row in curve)
    with pytest.raises(ValueError):
        exponent_curve(0)


def test_uniform_profile_has_no_imbalance_penalty():
    profile = TrainingProfile.uniform(80, PerronVector([0.2, 0.3, 0.5]))
    assert profile.alpha == 1.0
    assert profile.n_max == 80


def test_unbalanced_profile_penalty():
    profile = TrainingProfile([100, 50], [0.5, 0.5])
    np.testing.assert_allclose(profile.penalties, [1.0, 2.0])
    assert math.isclose(profile.alpha, 1.5)
    assert math.isclose(profile.alpha_from_inverse_counts, 1.5)
    with pytest.raises(ValueError):
        TrainingProfile([100, 0], [0.5, 0.5])
    with pytest.raises(ValueError):
        TrainingProfile([100], [0.5, 0.5])


def test_pc_lower_bound_worked_example():
    inputs = BoundInputs(0.0, 1.0, 0.0, TrainingProfile.uniform(100, PerronVector([1.0])))
    result = pc_lower_bound(inputs)
    assert abs(result.value - 0.9617) < 1e-4
    assert not result.vacuous
    assert result.alpha_beta == 1.0


def test_per_agent_class_bounds():
    profile = TrainingProfile([100, 50], [0.5, 0.5])
    inputs = BoundInputs(0.1, np.array([1.0, 2.0]), 0.0, profile)
    assert math.isclose(inputs.alpha_beta, 0.5 * 1.0 + 0.5 * 2.0 * 2.0)
    with pytest.raises(ValueError):
        BoundInputs(0.1, np.array([1.0, 2.0, 3.0]), 0.0, profile)


def test_bound_is_vacuous_when_complexity_reaches_exponent():
    exponent = exact_exponent(0.2)
    result = bound_value(1000, exponent, exponent, 1.0)
    assert result.vacuous and result.value == 0.0
    tiny = bound_value(1, exact_exponent(0.0), 0.0, 1.0)
    assert tiny.raw <= 0 and tiny.vacuous and tiny.value == 0.0


def test_bound_grows_with_training_size():
    exponent = exact_exponent(0.1)
    values = [bound_value(n, exponent, 0.01, 1.0).value for n in (100, 400, 1600, 6400)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] > 0.99


def _nonincreasing(values):
    return all(b <= a for a, b in zip(values, values[1:]))


def test_bound_shrinks_as_complexity_grows():
    profile = TrainingProfile.uniform(500, PerronVector([0.25] * 4))
    values = [pc_lower_bound(BoundInputs(0.1, 1.0, rho, profile)).value for rho in np.linspace(0.0, 0.3, 13)]
    assert _nonincreasing(values)
    assert values[0] > values[-1] == 0.0


def test_bound_shrinks_as_class_bound_grows():
    profile = TrainingProfile.uniform(500, PerronVector([0.5, 0.5]))
    values = [pc_lower_bound(BoundInputs(0.1, beta, 0.02, profile)).value for beta in np.linspace(0.5, 4.0, 15)]
    assert _nonincreasing(values)
    assert values[0] > values[-1]


def test_bound_shrinks_as_training_sets_become_unbalanced():
    perron = [0.5, 0.5]
    profiles = [TrainingProfile([800, smaller], perron) for smaller in (800, 600, 400, 200, 100, 50)]
    alphas = [profile.alpha for profile in profiles]
    assert all(b > a for a, b in zip(alphas, alphas[1:]))
    values = [pc_lower_bound(BoundInputs(0.1, 1.0, 0.02, profile)).value for profile in profiles]
    assert _nonincreasing(values)
    assert values[0] > values[-1]


@pytest.mark.parametrize("counts", [[300, 300, 300], [300, 150, 60]])
def test_uniform_per_agent_bounds_match_scalar_bound(counts):
    profile = TrainingProfile(counts, [0.5, 0.3, 0.2])
    scalar = pc_lower_bound(BoundInputs(0.15, 1.5, 0.01, profile))
    per_agent = pc_lower_bound(BoundInputs(0.15, np.full(3, 1.5), 0.01, profile))
    assert math.isclose(per_agent.alpha_beta, scalar.alpha_beta, rel_tol=0, abs_tol=1e-12)
    assert math.isclose(per_agent.value, scalar.value, rel_tol=0, abs_tol=1e-12)


def test_bound_inputs_validation():
    profile = TrainingProfile.uniform(10, PerronVector([1.0]))
    with pytest.raises(ValueError):
        BoundInputs(0.1, 0.0, 0.0, profile)
    with pytest.raises(ValueError):
        BoundInputs(0.1, 1.0, -0.1, profile)
    with pytest.raises(ValueError):
        BoundInputs(LOG2, 1.0, 0.0, profile)


def test_sample_complexity_worked_example():
    n = sample_complexity(1.0, 0.0, 1.0, 1.0, 0.05)
    assert n == 571
    assert self_consistency_check(1.0, 0.0, 1.0, 1.0, 0.05).passed
    assert not self_consistency_check(1.0, 0.0, 1.0, 1.0, 0.05, n_max=570).passed


def test_sample_complexity_validation():
    with pytest.raises(ValueError, match="complexity constant"):
        sample_complexity(0.0, 0.0, 1.0, 1.0, 0.05)
    with pytest.raises(ValueError, match="imbalance penalty"):
        sample_complexity(1.0, 0.0, 0.5, 1.0, 0.05)
    with pytest.raises(ValueError, match="epsilon"):
        sample_complexity(1.0, 0.0, 1.0, 1.0, 1.0)


def test_self_consistency_skips_when_complexity_dominates():
    check = self_consistency_check(10.0, 0.0, 1.0, 1.0, 0.05, n_max=1)
    assert check.skipped and not check.passed and check.bound is None


@settings(max_examples=100)
@given(
    constant=st.floats(0.1, 5.0),
    target_risk=st.floats(0.0, 0.6),
    alpha=st.floats(1.0, 3.0),
    beta=st.floats(0.5, 3.0),
    epsilon=st.floats(0.01, 0.5),
)
def test_sample_complexity_is_self_consistent(constant, target_risk, alpha, beta, epsilon):
    check = self_consistency_check(constant, target_risk, alpha, beta, epsilon)
    assert not check.skipped
    assert check.passed
    assert check.n_max > (constant / exact_exponent(target_risk)) ** 2


def test_network_complexity_bound_weights_by_penalty():
    profile = TrainingProfile([100, 25], [0.5, 0.5])
    bound, constant = network_complexity_bound([1.0, 2.0], profile)
    assert math.isclose(constant, 0.5 * 1.0 + 0.5 * 2.0 * 2.0)
    assert math.isclose(bound, constant / 10.0)
    with pytest.raises(ValueError):
        network_complexity_bound([1.0], profile)
    with pytest.raises(ValueError):
        network_complexity_bound([1.0, -1.0], profile)
