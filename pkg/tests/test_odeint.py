import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from bnode import diffcore as dc
from bnode.odeint import (IntegrationError, SolverConfig, TimeGrid, integrate,
                          integrate_batched_adaptive)


def decay(t, x, u):
    return -x


def test_single_rk4_step_matches_exponential():
    res = integrate(decay, np.array([1.0]), TimeGrid.from_steps(1, 0.1), SolverConfig("rk4"))
    assert res.states[1, 0] == pytest.approx(0.90483750, abs=5e-9)
    assert abs(res.states[1, 0] - math.exp(-0.1)) < 1e-6
    assert res.n_rhs == 4


def test_zero_rhs_is_constant():
    x0 = np.array([1.5, -2.0])
    for method in ("euler", "rk4", "dopri5"):
        res = integrate(lambda t, x, u: 0.0 * x, x0, TimeGrid.from_steps(5, 0.2), SolverConfig(method))
        np.testing.assert_array_equal(res.states, np.tile(x0, (6, 1)))


def test_dopri5_endpoint_accuracy():
    res = integrate(decay, np.array([1.0]), TimeGrid(0.0, 1.0, 1.0), SolverConfig("dopri5", rtol=1e-6))
    assert abs(res.states[-1, 0] - math.exp(-1.0)) < 1e-6
    assert res.n_steps >= 1 and res.ok


def test_rk4_fourth_order_convergence():
    def endpoint_error(n):
        res = integrate(decay, np.array([1.0]), TimeGrid.from_steps(n, 1.0 / n), SolverConfig("rk4"))
        return abs(res.states[-1, 0] - math.exp(-1.0))
    for n in (4, 8, 16):
        ratio = endpoint_error(n) / endpoint_error(2 * n)
        assert 8.0 <= ratio <= 32.0


def test_substeps_equal_finer_grid():
    coarse = integrate(decay, np.array([1.0]), TimeGrid.from_steps(4, 0.25), SolverConfig("rk4", substeps=4))
    fine = integrate(decay, np.array([1.0]), TimeGrid.from_steps(16, 1 / 16), SolverConfig("rk4"))
    np.testing.assert_allclose(coarse.states[-1], fine.states[-1], rtol=1e-13)


def test_linear_system_matches_matrix_exponential():
    A = np.array([[-1.0, 2.0], [-2.0, -1.0]])
    x0 = np.array([1.0, 0.5])
    res = integrate(lambda t, x, u: x @ A.T, x0, TimeGrid.from_steps(50, 0.02), SolverConfig("rk4"))
    ref = scipy.linalg.expm(A) @ x0
    # global RK4 error is O(h^4) = 1.6e-7 at h = 0.02
    np.testing.assert_allclose(res.states[-1], ref, rtol=0, atol=1.6e-7)


def test_piecewise_constant_inputs_are_held_per_interval():
    u = np.array([[1.0], [0.0], [2.0]])
    res = integrate(lambda t, x, ui: ui, np.zeros(1), TimeGrid.from_steps(3, 0.5), SolverConfig("euler"), u)
    np.testing.assert_allclose(res.states[:, 0], [0.0, 0.5, 0.5, 1.5])
    res5 = integrate(lambda t, x, ui: ui, np.zeros(1), TimeGrid.from_steps(3, 0.5), SolverConfig("dopri5"), u)
    np.testing.assert_allclose(res5.states[:, 0], [0.0, 0.5, 0.5, 1.5], atol=1e-12)


def test_unrolled_gradient_matches_analytic():
    x0 = dc.DiffValue(np.array([1.3]), requires_grad=True)
    with dc.Tape():
        res = integrate(decay, x0, TimeGrid.from_steps(20, 0.1), SolverConfig("rk4"))
        end = dc.sum(res.states[-1])
    (g,) = dc.backward(end, [x0])
    assert g[0] == pytest.approx(math.exp(-2.0), rel=1e-4)


def test_non_finite_state_returns_partial_trajectory():
    def blowup(t, x, u):
        with np.errstate(over="ignore", invalid="ignore"):
            return x * x * 1e3
    res = integrate(blowup, np.array([10.0]), TimeGrid.from_steps(20, 0.5), SolverConfig("rk4"))
    assert not res.ok and res.failed_at is not None
    assert len(res.states) == len(res.times) < 21
    assert np.all(np.isfinite(res.states))


def test_dopri5_step_budget_raises():
    with pytest.raises(IntegrationError):
        integrate(lambda t, x, u: -1e4 * x, np.array([1.0]), TimeGrid(0, 1, 1),
                  SolverConfig("dopri5", max_steps=5))


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        SolverConfig("heun")
    with pytest.raises(ValueError):
        SolverConfig(substeps=0)
    with pytest.raises(ValueError):
        SolverConfig(rtol=0.0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0.3)
    with pytest.raises(ValueError):
        integrate(decay, np.array([np.nan]), TimeGrid(0, 1, 0.5))


def test_batched_identical_problems():
    single = integrate_batched_adaptive(decay, np.array([[1.0, 2.0]]), TimeGrid(0, 2, 0.5))
    batch = integrate_batched_adaptive(decay, np.array([[1.0, 2.0]] * 3), TimeGrid(0, 2, 0.5))
    for b in range(3):
        np.testing.assert_array_equal(batch.states[:, b], single.states[:, 0])
    assert batch.n_steps == single.n_steps


def test_batched_worst_sample_drives_steps():
    rates = np.array([1.0, 200.0])
    rhs = lambda t, x, u: -rates[: x.shape[0], None] * x  # noqa: E731
    smooth = integrate_batched_adaptive(rhs, np.array([[1.0]]), TimeGrid(0, 1, 0.25))
    both = integrate_batched_adaptive(rhs, np.array([[1.0], [1.0]]), TimeGrid(0, 1, 0.25))
    assert both.n_steps >= smooth.n_steps
    assert both.n_rhs > smooth.n_rhs


def test_batched_zero_rhs_minimal_steps():
    res = integrate_batched_adaptive(lambda t, x, u: 0.0 * x, np.ones((4, 3)), TimeGrid(0, 1, 0.1))
    assert res.n_steps <= 10 and res.n_rejected == 0


@settings(max_examples=25, deadline=None)
@given(st.floats(-3.0, -0.05), st.floats(0.1, 5.0))
def test_dopri5_exponential_property(rate, x0):
    res = integrate(lambda t, x, u: rate * x, np.array([x0]), TimeGrid(0, 1, 0.25),
                    SolverConfig("dopri5", rtol=1e-8, atol=1e-10))
    exact = x0 * np.exp(rate * res.times)
    np.testing.assert_allclose(res.states[:, 0], exact, rtol=1e-6)
