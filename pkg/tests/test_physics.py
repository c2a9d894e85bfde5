import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnode.odeint import SolverConfig, TimeGrid, integrate
from bnode.physics import (KoopmanAnalyticModel, LinearStateSpace, ShfModel, simulate_lti,
                           zoh_discretize)


@pytest.fixture
def shf():
    return ShfModel()


def test_shf_equilibrium(shf):
    T = np.full(16, 300.0)
    assert np.all(shf.rhs(T, np.array([300.0, 300.0])) == 0.0)


def test_shf_energy_balance(shf):
    rng = np.random.default_rng(0)
    T, u = rng.uniform(280, 460, 16), rng.uniform(273.15, 473.15, 2)
    inflow = (u[0] - T[0]) / (shf.R_i / 2) + (u[1] - T[-1]) / (shf.R_i / 2)
    assert np.sum(shf.C_i * shf.rhs(T, u)) == pytest.approx(inflow, rel=1e-12)


def test_shf_steady_state_is_linear_profile(shf):
    u = np.array([473.15, 273.15])
    sys = shf.as_lti()
    T_ss = np.linalg.solve(sys.A, -sys.B @ u)
    # resistance ladder: positions of cell centres along total resistance R
    pos = (np.arange(16) + 0.5) / 16
    np.testing.assert_allclose(T_ss, u[0] + (u[1] - u[0]) * pos, rtol=1e-12)
    xs, _ = simulate_lti(sys, np.full((1, 16), 300.0), np.tile(u, (1, 201, 1)), 0.01, 200)
    np.testing.assert_allclose(xs[0, -1], T_ss, atol=1e-3)


def test_shf_lti_structure(shf):
    sys = shf.as_lti()
    A = sys.A
    assert np.count_nonzero(np.triu(A, 2)) == 0 and np.count_nonzero(np.tril(A, -2)) == 0
    assert np.count_nonzero(sys.B[1:-1]) == 0
    np.testing.assert_allclose(A[1:-1].sum(axis=1), 0.0, atol=1e-9)
    g_boundary = 1.0 / (shf.C_i * shf.R_i / 2)
    assert A[0].sum() == pytest.approx(-g_boundary)
    assert np.all(np.linalg.eigvals(A).real < 0)
    assert sys.C.shape == (48, 16) and sys.D.shape == (48, 2)


def test_shf_rhs_and_matrices_agree(shf):
    rng = np.random.default_rng(1)
    sys = shf.as_lti()
    T, u = rng.uniform(250, 500, (100, 16)), rng.uniform(250, 500, (100, 2))
    assert np.max(np.abs(shf.rhs(T, u) - (T @ sys.A.T + u @ sys.B.T))) < 1e-9
    assert np.max(np.abs(shf.outputs(T, u) - (T @ sys.C.T + u @ sys.D.T))) < 1e-9


def test_shf_outputs_layout(shf):
    T = np.linspace(300, 400, 16)
    u = np.array([290.0, 410.0])
    y = shf.outputs(T, u)
    assert y[2] == T[0] and y[-1] == T[-1]
    assert y[0] == pytest.approx((290.0 - 300.0) / (shf.R_i / 2))
    assert y[1] == pytest.approx(y[3])  # right link of cell 1 is the left link of cell 2


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_shf_maximum_principle(seed):
    rng = np.random.default_rng(seed)
    lo, hi = 273.15, 473.15
    shf = ShfModel()
    x0 = rng.uniform(lo, hi, (1, 16))
    u = rng.uniform(lo, hi, (1, 51, 2))
    xs, _ = simulate_lti(shf.as_lti(), x0, u, 0.02, 50)
    assert xs.min() >= lo - 1e-9 and xs.max() <= hi + 1e-9


def test_shf_invalid():
    with pytest.raises(ValueError):
        ShfModel(R=0.0)
    with pytest.raises(ValueError):
        ShfModel(n_seg=1)
    with pytest.raises(ValueError):
        ShfModel().rhs(np.zeros(15), np.zeros(2))


def test_koopman_rhs_examples():
    m = KoopmanAnalyticModel()
    np.testing.assert_array_equal(m.rhs(np.zeros(2)), [0.0, 0.0])
    np.testing.assert_array_equal(m.rhs(np.array([1.0, 1.0])), [-0.5, 0.0])


def test_koopman_x1_analytic():
    m = KoopmanAnalyticModel()
    res = integrate(lambda t, x, u: m.rhs(x), np.array([2.0, 4.0]), TimeGrid(0, 4, 0.5),
                    SolverConfig("dopri5", rtol=1e-9, atol=1e-12))
    np.testing.assert_allclose(res.states[:, 0], 2.0 * np.exp(-0.5 * res.times), rtol=1e-7)


def test_koopman_lifted_eigenvalues():
    ev = np.sort(np.linalg.eigvals(KoopmanAnalyticModel().lifted_lti().A).real)
    np.testing.assert_allclose(ev, [-1.0, -1.0, -0.5])
    ev2 = np.sort(np.linalg.eigvals(KoopmanAnalyticModel(-0.7, -0.7).lifted_lti().A).real)
    np.testing.assert_allclose(ev2, [-1.4, -0.7, -0.7])


@settings(max_examples=15, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_koopman_lifted_matches_nonlinear(x1, x2):
    m = KoopmanAnalyticModel()
    x0 = np.array([x1, x2])
    cfg = SolverConfig("dopri5", rtol=1e-10, atol=1e-12)
    nl = integrate(lambda t, x, u: m.rhs(x), x0, TimeGrid(0, 3, 0.5), cfg)
    sys = m.lifted_lti()
    lin, _ = simulate_lti(sys, m.lift(x0)[None], np.zeros((1, 7, 0)), 0.5, 6)
    np.testing.assert_allclose(lin[0, :, :2], nl.states, atol=1e-6)


def test_zoh_discretize_scalar():
    sys = LinearStateSpace([[-2.0]], [[1.0]], [[1.0]], [[0.0]])
    Ad, Bd = zoh_discretize(sys, 0.5)
    assert Ad[0, 0] == pytest.approx(np.exp(-1.0))
    assert Bd[0, 0] == pytest.approx((1 - np.exp(-1.0)) / 2)


def test_lti_shape_validation():
    with pytest.raises(ValueError):
        LinearStateSpace(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((1, 2)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        LinearStateSpace(np.zeros((2, 2)), np.zeros((3, 1)), np.zeros((1, 2)), np.zeros((1, 1)))
