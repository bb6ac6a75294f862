from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sml_sim.data import (
    PredictionStream,
    four_agent_gaussian_scene,
    gaussian_training_set,
    mean_shift_scene,
    prediction_stream,
)
from sml_sim.graph import CombinationMatrix, build_averaging_matrix, directed_ring_adjacency, perron_eigenvector
from sml_sim.model import MLPArchitecture, TrainingHyperparameters
from sml_sim.social_learning import (
    BeliefState,
    DebiasedProvider,
    FixedFunctionProvider,
    GaussianLikelihoodProvider,
    RegimeSchedule,
    adaptation_times,
    asl_step,
    bayes_classifier,
    beliefs_from_lambda,
    check_consistency_conditions,
    decide,
    run_prediction,
    sl_step,
    trajectory_rows,
)
from sml_sim.stats import conditional_means, make_debiased_statistic
from sml_sim.training import train_erm
from sml_sim.util import derive_seed

RING = build_averaging_matrix(directed_ring_adjacency(4))


def _blank_stream(length: int, agents: int = 4, state: int = 1) -> PredictionStream:
    return PredictionStream(tuple(np.zeros((length, 1)) for _ in range(agents)), np.full(length, state))


vectors = arrays(np.float64, (4, 1), elements=st.floats(-100, 100))


@given(vectors, vectors, vectors, vectors)
def test_sl_step_is_linear(lam_a, lam_b, stats_a, stats_b):
    combined = sl_step(BeliefState(lam_a + lam_b), RING, stats_a + stats_b).values
    separate = sl_step(BeliefState(lam_a), RING, stats_a).values + sl_step(BeliefState(lam_b), RING, stats_b).values
    np.testing.assert_allclose(combined, separate, atol=1e-9)


@given(vectors, vectors, st.floats(min_value=0.01, max_value=0.99))
def test_asl_step_discounts_past_evidence(lam, stats, delta):
    stepped = asl_step(BeliefState(lam), RING, stats, delta).values
    np.testing.assert_allclose(stepped, RING.weights.T @ ((1 - delta) * lam + stats), atol=1e-9)


def test_step_advances_time_and_checks_shapes():
    state = sl_step(BeliefState.initial(4), RING, np.ones(4))
    assert state.time == 1
    with pytest.raises(ValueError, match="shape"):
        sl_step(state, RING, np.ones(3))
    with pytest.raises(ValueError, match="NaN"):
        sl_step(state, RING, np.array([np.nan, 0.0, 0.0, 0.0]))
    with pytest.raises(ValueError, match="step size"):
        asl_step(state, RING, np.ones(4), 1.0)


def _feature_provider(agents: int = 4) -> FixedFunctionProvider:
    return FixedFunctionProvider([lambda features: features[:, 0]] * agents)


def _stream_from_statistics(stats: np.ndarray, states) -> PredictionStream:
    return PredictionStream(tuple(stats[:, [k]] for k in range(stats.shape[1])), np.asarray(states))


step_statistics = arrays(np.float64, (40, 4), elements=st.floats(-10, 10))


@settings(max_examples=50)
@given(step_statistics, arrays(np.float64, (4, 1), elements=st.floats(-50, 50)), st.floats(0.01, 0.99))
def test_adaptive_beliefs_stay_within_discounted_bound(stats, start, delta):
    stream = _stream_from_statistics(stats, np.ones(40, dtype=int))
    result = run_prediction("asl", RING, _feature_provider(), stream, delta=delta, initial=BeliefState(start))
    bound = np.max(np.abs(stats)) / delta + np.max(np.abs(start))
    assert np.all(np.abs(result.lambdas) <= bound * (1 + 1e-9) + 1e-12)


@given(
    arrays(np.float64, (5, 3), elements=st.integers(-1000, 1000).map(float)),
    st.floats(min_value=1e-3, max_value=1e3),
)
def test_decisions_ignore_positive_rescaling(values, scale):
    binary = BeliefState(values[:, :1])
    assert decide(BeliefState(scale * values[:, :1])).tolist() == decide(binary).tolist()
    classes = (0, 1, 2, 3)
    assert decide(BeliefState(scale * values), classes).tolist() == decide(BeliefState(values), classes).tolist()


@settings(max_examples=50)
@given(step_statistics, st.lists(st.sampled_from([1, -1]), min_size=40, max_size=40))
def test_two_class_engine_matches_binary_engine(stats, states):
    binary = run_prediction("sl", RING, _feature_provider(), _stream_from_statistics(stats, states))
    # +1 plays the reference class 0, -1 plays class 1
    relabelled = [0 if s == 1 else 1 for s in states]
    two_class = run_prediction(
        "sl", RING, _feature_provider(), _stream_from_statistics(stats, relabelled), classes=(0, 1)
    )
    np.testing.assert_array_equal(two_class.lambdas, binary.lambdas)
    np.testing.assert_array_equal(two_class.decisions, np.where(binary.decisions == 1, 0, 1))
    np.testing.assert_array_equal(two_class.correct, binary.correct)


def test_adaptive_step_near_one_forgets_the_past():
    stats = np.random.default_rng(8).normal(scale=3.0, size=(25, 4))
    stream = _stream_from_statistics(stats, np.ones(25, dtype=int))
    result = run_prediction("asl", RING, _feature_provider(), stream, delta=1 - 1e-12)
    for i in range(25):
        np.testing.assert_allclose(result.lambdas[i, :, 0], RING.weights.T @ stats[i], rtol=0, atol=1e-9)


def test_binary_decision_ties_go_to_reference_class():
    state = BeliefState(np.array([[0.0], [1e-9], [-1e-9]]))
    assert decide(state).tolist() == [1, 1, -1]
    assert decide(state, classes=(0, 1)).tolist() == [0, 0, 1]


def test_multiclass_decision_maximizes_belief():
    # lambda_j = log phi_0 / phi_j, so the largest belief has the most negative lambda or is the reference
    state = BeliefState(np.array([[1.0, 2.0], [-1.0, -3.0], [0.0, 0.0], [-2.0, -2.0]]))
    assert decide(state, classes=(7, 8, 9)).tolist() == [7, 9, 7, 8]
    with pytest.raises(ValueError):
        decide(state, classes=(7, 8))


@given(st.floats(-30, 30))
def test_binary_beliefs_are_logistic(lam):
    beliefs = beliefs_from_lambda(lam)
    assert math.isclose(beliefs[0], 1 / (1 + math.exp(-lam)), rel_tol=1e-9, abs_tol=1e-15)
    assert math.isclose(beliefs.sum(), 1.0)


def test_multiclass_beliefs_follow_log_ratios():
    beliefs = beliefs_from_lambda([math.log(2.0), math.log(4.0)])
    np.testing.assert_allclose(beliefs, [4 / 7, 2 / 7, 1 / 7])


def test_constant_statistics_grow_at_network_average_rate():
    constants = [0.3, -0.1, 0.5, 0.2]
    perron = perron_eigenvector(RING)
    result = run_prediction("sl", RING, FixedFunctionProvider.constant(constants), _blank_stream(2000))
    expected = perron.average(constants)
    assert np.all(np.abs(result.lambdas[-1, :, 0] / 2000 - expected) < 1e-2)
    assert result.decisions[-1].tolist() == [1, 1, 1, 1]


def test_asl_with_constant_statistics_settles_at_scaled_average():
    constants = [0.4, 0.0, 0.2, -0.2]
    result = run_prediction("asl", RING, FixedFunctionProvider.constant(constants), _blank_stream(600), delta=0.05)
    # fixed point of lambda = A^T((1 - delta) lambda + c)
    transposed = RING.weights.T
    expected = np.linalg.solve(np.eye(4) - 0.95 * transposed, transposed @ np.array(constants))
    np.testing.assert_allclose(result.lambdas[-1, :, 0], expected, rtol=1e-6)
    assert math.isclose(perron_eigenvector(RING).average(result.lambdas[-1, :, 0]), 0.1 / 0.05, rel_tol=1e-6)


def test_run_prediction_validates_engine_and_delta():
    provider = FixedFunctionProvider.constant([0.1] * 4)
    stream = _blank_stream(5)
    with pytest.raises(ValueError, match="unknown engine"):
        run_prediction("diffusion", RING, provider, stream)
    with pytest.raises(ValueError, match="adaptive engine only"):
        run_prediction("sl", RING, provider, stream, delta=0.1)
    with pytest.raises(ValueError, match="step size"):
        run_prediction("asl", RING, provider, stream)
    with pytest.raises(ValueError, match="class set"):
        run_prediction("sl", RING, provider, _blank_stream(5, state=3))


def test_zero_length_stream_gives_empty_result():
    result = run_prediction("sl", RING, FixedFunctionProvider.constant([0.1] * 4), _blank_stream(0))
    assert result.lambdas.shape == (0, 4, 1)
    assert list(trajectory_rows(result)) == []
    assert result.error_rate.shape == (0,)


def test_trajectory_rows_cover_every_agent_and_step():
    result = run_prediction("sl", RING, FixedFunctionProvider.constant([-0.2] * 4), _blank_stream(3))
    rows = list(trajectory_rows(result, run_id=7))
    assert len(rows) == 12
    first = rows[0]
    assert (first.run_id, first.i, first.agent, first.component) == (7, 1, 0, -1)
    assert first.decision == -1 and not first.correct
    assert rows[-1].i == 3


def test_regime_schedule_cycles_states():
    schedule = RegimeSchedule.cycle([1, -1], period=3, length=8)
    assert schedule.states(8).tolist() == [1, 1, 1, -1, -1, -1, 1, 1]
    assert schedule.switch_points(8) == [3, 6]
    assert schedule.state_at(4) == -1
    assert RegimeSchedule.constant(1).states(0).tolist() == []
    with pytest.raises(ValueError):
        RegimeSchedule(((1, 1),))
    with pytest.raises(ValueError):
        schedule.validate((0, 1))


def test_adaptation_time_counts_steps_until_lasting_agreement():
    schedule = RegimeSchedule(((0, 1), (50, -1)))
    stream = prediction_stream(mean_shift_scene([1.0] * 4), schedule, 100, seed=5)
    result = run_prediction("asl", RING, GaussianLikelihoodProvider(mean_shift_scene([1.0] * 4)), stream, delta=0.2)
    times = adaptation_times(result, [0, 50])
    assert times[1] is not None
    assert np.all(result.correct[50 + times[1]:])
    assert not np.all(result.correct[50 + times[1] - 1])


def test_adaptive_learning_tracks_a_state_flip():
    scene = mean_shift_scene([0.5] * 4)
    provider = GaussianLikelihoodProvider(scene)
    schedule = RegimeSchedule(((0, 1), (100, -1)))
    adapted = 0
    for run in range(100):
        stream = prediction_stream(scene, schedule, 200, seed=derive_seed(2024, "flip", run))
        result = run_prediction("asl", RING, provider, stream, delta=0.1)
        time = adaptation_times(result, [0, 100])[1]
        adapted += time is not None and time <= 50
    assert adapted >= 90


def test_true_ratios_on_four_agent_scene_grow_linearly():
    scene = four_agent_gaussian_scene()
    provider = GaussianLikelihoodProvider(scene)
    at_100, at_200 = [], []
    for run in range(10):
        stream = prediction_stream(scene, RegimeSchedule.constant(1), 200, seed=derive_seed(11, "run", run))
        result = run_prediction("sl", RING, provider, stream)
        at_100.append(result.lambdas[99, 0, 0])
        at_200.append(result.lambdas[199, 0, 0])
    at_100, at_200 = np.array(at_100), np.array(at_200)
    assert at_200.mean() > at_100.mean() > 0
    assert np.sum((at_200 > at_100) & (at_100 > 0)) >= 9


@pytest.mark.slow
def test_trained_agents_on_four_agent_scene_grow_at_predicted_rate():
    scene = four_agent_gaussian_scene()
    perron = perron_eigenvector(RING)
    deviations = []
    for run in range(10):
        dataset = gaussian_training_set(scene, 100, derive_seed(3, "run", run, "train"))
        statistics = []
        for agent in range(4):
            arch = MLPArchitecture((3, 10, 10, 2))
            hyper = TrainingHyperparameters(300, 10, 0.01, derive_seed(3, "run", run, "agent", agent))
            model = train_erm(dataset.agent_dataset(agent), arch, hyper).model
            statistics.append(make_debiased_statistic(model, dataset.agent_dataset(agent), agent=agent))
        means = conditional_means(statistics, scene.sample, perron, 4000, derive_seed(3, "run", run, "means"))
        slope = means.network_plus - means.network_training
        stream = prediction_stream(scene, RegimeSchedule.constant(1), 200, seed=derive_seed(3, "run", run, "stream"))
        result = run_prediction("sl", RING, DebiasedProvider(statistics), stream)
        deviations.append(result.lambdas[199, 0, 0] / 200 - slope)
    deviations = np.array(deviations)
    stderr = deviations.std(ddof=1) / math.sqrt(deviations.size)
    assert abs(deviations.mean()) < 4 * stderr + 5e-3


def test_consistency_conditions_hold_for_true_ratios():
    scene = mean_shift_scene([0.3, 0.6])
    functions = [lambda h, k=k: scene.log_likelihood_ratio(k, h) for k in range(2)]
    perron = perron_eigenvector(build_averaging_matrix(directed_ring_adjacency(2)))
    report = check_consistency_conditions(conditional_means(functions, scene.sample, perron, 3000, seed=4))
    assert report.condition_plus and report.condition_minus and report.satisfied
    assert report.to_dict()["satisfied"] is True


def test_consistency_conditions_fail_for_inverted_statistics():
    scene = mean_shift_scene([0.5])
    inverted = [lambda h: -scene.log_likelihood_ratio(0, h)]
    perron = perron_eigenvector(CombinationMatrix(np.ones((1, 1))))
    report = check_consistency_conditions(conditional_means(inverted, scene.sample, perron, 2000, seed=4))
    assert not report.satisfied


def _q_function(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def test_single_observation_bayes_error_matches_gaussian_tail():
    scene = mean_shift_scene([0.5], dim=1)
    rng_seed = 12
    errors = 0
    trials = 10000
    plus = scene.sample(0, 1, trials // 2, rng_seed)
    minus = scene.sample(0, -1, trials // 2, rng_seed + 1)
    for features, label in ((plus, 1), (minus, -1)):
        for row in features:
            decision = bayes_classifier(
                lambda h: scene.logpdf(0, 1, h), lambda h: scene.logpdf(0, -1, h), row.reshape(1, 1)
            )[0]
            errors += decision != label
    # means +-0.5, unit variance: error = Q(0.5)
    assert abs(errors / trials - _q_function(0.5)) < 0.02


def test_bayes_error_decays_like_gaussian_tail_of_root_i():
    # N(+1, 1) against N(-1, 1): the summed log ratio after i samples is N(2i, 4i), error = Q(sqrt(i))
    runs, steps = 10000, 50
    features = np.random.default_rng(21).normal(loc=1.0, scale=1.0, size=(runs, steps))

    def plus(h):
        return -0.5 * (h[:, 0] - 1.0) ** 2

    def minus(h):
        return -0.5 * (h[:, 0] + 1.0) ** 2

    decisions = np.vstack([bayes_classifier(plus, minus, row.reshape(-1, 1)) for row in features])
    error = (decisions != 1).mean(axis=0)
    for i in (1, 4):
        assert abs(error[i - 1] - _q_function(math.sqrt(i))) < 0.015
    assert error[steps - 1] < 1e-3
    assert _q_function(math.sqrt(steps)) < 1e-3


def test_bayes_classifier_accumulates_evidence():
    scene = mean_shift_scene([0.3], dim=1)
    features = scene.sample(0, -1, 400, seed=2)
    decisions = bayes_classifier(lambda h: scene.logpdf(0, 1, h), lambda h: scene.logpdf(0, -1, h), features)
    assert decisions.shape == (400,)
    assert np.all(decisions[-50:] == -1)
    with pytest.raises(ValueError):
        bayes_classifier(lambda h: h, lambda h: h, features, priors=(0.0, 1.0))
