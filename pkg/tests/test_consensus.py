import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from decolearn.consensus import (
    InvalidGapError,
    estimate_iterations,
    iterations_to_tolerance,
    relative_error,
    run_consensus,
    step,
    step_elementwise,
)
from decolearn.exceptions import ConsensusError
from decolearn.graph import (
    build_complete,
    build_graph,
    build_inverse_chord_expander,
    build_ring,
    spectral_gap,
    transition_matrix,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_step_constant_fixed_point():
    tm = transition_matrix(build_inverse_chord_expander(7))
    assert np.allclose(step(tm, np.full(7, 2.5)), 2.5)


def test_step_complete_three():
    tm = transition_matrix(build_complete(3), 1 / 3)
    assert np.allclose(step(tm, [1, 2, 3]), [2, 2, 2])


def test_step_ring_four_impulse():
    tm = transition_matrix(build_ring(4), 0.25)
    assert np.allclose(step(tm, [1, 0, 0, 0]), [0.5, 0.25, 0, 0.25])


def test_step_dimension_mismatch():
    tm = transition_matrix(build_ring(4))
    with pytest.raises(ValueError):
        step(tm, np.zeros(5))


@given(st.sampled_from(["ring", "expander", "complete"]), st.integers(3, 30), st.data())
def test_elementwise_matches_matrix_and_conserves_mean(kind, S, data):
    g = build_graph(kind, S)
    tm = transition_matrix(g)
    xi = data.draw(arrays(float, S, elements=finite))
    a, b = step(tm, xi), step_elementwise(g, tm.eps, xi)
    scale = max(1.0, np.abs(xi).max())
    assert np.allclose(a, b, atol=1e-12 * scale, rtol=0)
    assert abs(a.mean() - xi.mean()) <= 1e-12 * scale


def test_relative_error_at_consensus_is_zero():
    tm = transition_matrix(build_ring(5))
    assert relative_error(tm, np.full(5, 3.0), 0) == 0.0


@pytest.mark.parametrize("S", [3, 10, 50])
def test_relative_error_impulse(S):
    tm = transition_matrix(build_ring(S))
    xi = np.zeros(S)
    xi[0] = 1.0
    assert relative_error(tm, xi, 0) == pytest.approx(math.sqrt(S - 1), rel=1e-12)


def test_relative_error_decays_at_lambda2():
    # ring eigenvalues are well separated below the (double) second one
    tm = transition_matrix(build_ring(9))
    lam2, _ = spectral_gap(tm)
    xi = np.random.default_rng(0).uniform(-1, 2, 9)
    ratio = relative_error(tm, xi, 61) / relative_error(tm, xi, 60)
    assert ratio == pytest.approx(abs(lam2), rel=1e-3)


def test_relative_error_zero_mean_fallback():
    tm = transition_matrix(build_ring(4))
    xi = np.array([1.0, -1.0, 1.0, -1.0])
    # absolute error is the norm of the state
    assert relative_error(tm, xi, 0) == pytest.approx(2.0)
    assert np.isfinite(relative_error(tm, xi, 3))


def test_estimate_iterations_examples():
    assert estimate_iterations(10, 1e-3, 1.0) == 1
    assert estimate_iterations(100, 1e-3, 0.5) == 14
    with pytest.raises(InvalidGapError):
        estimate_iterations(10, 1e-3, 0.0)
    with pytest.raises(ValueError):
        estimate_iterations(10, 1.5, 0.5)


def test_estimate_iterations_ring_grows_like_s2_log_s():
    preds = []
    for S in (20, 40, 80):
        _, gap = spectral_gap(transition_matrix(build_ring(S)))
        preds.append(estimate_iterations(S, 1e-3, gap))
    slope = np.polyfit(np.log([20, 40, 80]), np.log(preds), 1)[0]
    assert 1.9 < slope < 2.4


def test_run_constant_converges_immediately():
    run = run_consensus(transition_matrix(build_ring(6)), np.ones(6))
    assert run.iterations == 0


def test_run_complete_one_step():
    tm = transition_matrix(build_complete(6), 1 / 6)
    run = run_consensus(tm, np.arange(6.0), tol=1e-12)
    assert run.iterations == 1


def test_run_expander_seven_uniform():
    xi = np.random.default_rng(1).uniform(-1, 2, 7)
    run = run_consensus(transition_matrix(build_inverse_chord_expander(7)), xi, tol=1e-5)
    mean = xi.mean()
    assert np.all(np.abs(run.result - mean) <= 1e-5 * abs(mean))
    assert np.allclose(run.sums, xi.sum(), rtol=1e-5)


def test_run_zero_mean_uses_absolute_tolerance():
    xi = np.array([1.0, -1.0, 2.0, -2.0, 0.5, -0.5])
    run = run_consensus(transition_matrix(build_ring(6)), xi, tol=1e-6)
    assert np.abs(run.result).max() <= 1e-6


def test_run_raises_with_last_error():
    with pytest.raises(ConsensusError) as info:
        run_consensus(transition_matrix(build_ring(30)), np.arange(30.0), tol=1e-9, max_iters=5)
    assert info.value.last_error > 1e-9


def test_run_reports_failing_column():
    X = np.zeros((30, 3))
    X[:, 1] = np.arange(30.0)
    X[:, 0] = 1.0
    X[:, 2] = 2.0
    with pytest.raises(ConsensusError) as info:
        run_consensus(transition_matrix(build_ring(30)), X, tol=1e-9, max_iters=5)
    assert info.value.index == 1


def test_observer_sees_transmitted_states():
    tm = transition_matrix(build_ring(5))
    xi = np.arange(5.0) + 1
    seen = []
    run = run_consensus(tm, xi, tol=1e-4, observer=lambda t, x: seen.append((t, x.copy())))
    assert seen[0][0] == 1 and np.array_equal(seen[0][1], xi)
    assert len(seen) == run.iterations


@given(
    st.sampled_from(["ring", "expander", "complete"]),
    st.integers(3, 40),
    st.integers(0, 2**32 - 1),
)
def test_converged_run_satisfies_sup_norm_invariant(kind, S, seed):
    xi = np.random.default_rng(seed).uniform(-1, 2, S)
    tol = 1e-6
    run = run_consensus(transition_matrix(build_graph(kind, S)), xi, tol=tol)
    mean = xi.mean()
    bound = tol * abs(mean) if abs(mean) > 1e-12 * np.linalg.norm(xi) else tol
    floor = 64 * np.finfo(float).eps * np.abs(run.result).max()
    assert np.abs(run.result - mean).max() <= max(bound, floor) + 1e-15


@pytest.mark.parametrize("kind", ["ring", "complete", "expander"])
@pytest.mark.parametrize("S", [7, 16, 31, 50])
def test_iterations_within_three_times_prediction(kind, S):
    tm = transition_matrix(build_graph(kind, S))
    _, gap = spectral_gap(tm)
    xi = np.random.default_rng(S).uniform(-1, 2, S)
    run = run_consensus(tm, xi, tol=1e-3, criterion="relative")
    assert run.iterations <= 3 * estimate_iterations(S, 1e-3, gap)


def test_expander_beats_ring_with_growing_ratio():
    ratios = []
    for S in (31, 61, 101, 199):
        xi = np.random.default_rng(S).uniform(-1, 2, S)
        t = {}
        for kind in ("ring", "expander"):
            tm = transition_matrix(build_graph(kind, S))
            t[kind] = run_consensus(tm, xi, tol=1e-3, criterion="relative").iterations
        assert t["expander"] < t["ring"]
        ratios.append(t["ring"] / t["expander"])
    assert all(b > a for a, b in zip(ratios, ratios[1:]))


def test_trajectory_monotone_after_burn_in():
    xi = np.random.default_rng(3).uniform(-1, 2, 31)
    run = run_consensus(transition_matrix(build_inverse_chord_expander(31)), xi, tol=1e-8)
    tail = np.array(run.trajectory_error[10:])
    assert np.all(np.diff(tail) <= 1e-12 * tail[:-1])


def test_iterations_to_tolerance_matches_run():
    tm = transition_matrix(build_inverse_chord_expander(23))
    X = np.random.default_rng(4).uniform(-1, 2, (23, 6))
    counts = iterations_to_tolerance(tm, X, 1e-3)
    for j in range(6):
        run = run_consensus(tm, X[:, j], tol=1e-3, criterion="relative")
        assert counts[j] == run.iterations
