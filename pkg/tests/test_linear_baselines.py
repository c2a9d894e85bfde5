import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnode import linear_baselines as lb
from bnode.physics import KoopmanAnalyticModel, LinearStateSpace, ShfModel, simulate_lti


def random_stable(n, m, p, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    A = M - (np.abs(np.linalg.eigvals(M).real).max() + 1.0) * np.eye(n)
    return LinearStateSpace(A, rng.normal(size=(n, m)), rng.normal(size=(p, n)), np.zeros((p, m)))


def test_diagonal_hankel_values_by_hand():
    sys = LinearStateSpace(np.diag([-1.0, -10.0]), np.eye(2), np.eye(2), np.zeros((2, 2)))
    hsv, *_ , P, Q = lb.balance(sys)
    # A P + P A^T + I = 0 with diagonal A gives P = Q = diag(1/2, 1/20)
    np.testing.assert_allclose(P, np.diag([0.5, 0.05]), atol=1e-14)
    np.testing.assert_allclose(Q, np.diag([0.5, 0.05]), atol=1e-14)
    np.testing.assert_allclose(hsv, [0.5, 0.05], rtol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_balanced_gramians_are_equal_and_diagonal(seed):
    sys = random_stable(6, 2, 3, seed)
    hsv, T, T_inv, P, Q = lb.balance(sys)
    np.testing.assert_allclose(T_inv @ T, np.eye(6), atol=1e-8)
    Pb = T_inv @ P @ T_inv.T
    Qb = T.T @ Q @ T
    scale = hsv[0]
    assert np.abs(Pb - np.diag(hsv)).max() / scale < 1e-8
    assert np.abs(Qb - np.diag(hsv)).max() / scale < 1e-8
    assert np.all(np.diff(hsv) <= 0) and np.all(hsv >= 0)
    assert lb.lyapunov_residual(sys.A, P, sys.B @ sys.B.T) < 1e-8


def test_shf_balancing_residual():
    sys = ShfModel().as_lti()
    sys = LinearStateSpace(sys.A, sys.B, np.eye(16), np.zeros((16, 2)))
    hsv, T, T_inv, P, Q = lb.balance(sys)
    Pb = T_inv @ P @ T_inv.T
    assert np.abs(Pb - np.diag(hsv)).max() / hsv[0] < 1e-8


def test_non_hurwitz_rejected():
    sys = LinearStateSpace(np.diag([-1.0, 0.5]), np.eye(2), np.eye(2), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="Hurwitz"):
        lb.tbr_reduce(sys, 1)


def test_lyapunov_residual_guard(monkeypatch):
    import scipy.linalg
    monkeypatch.setattr(scipy.linalg, "solve_continuous_lyapunov", lambda A, W: np.eye(A.shape[0]))
    with pytest.raises(np.linalg.LinAlgError, match="residual"):
        lb.balance(random_stable(3, 1, 1, 0))


def test_tbr_order_bounds():
    sys = random_stable(4, 1, 1, 1)
    with pytest.raises(ValueError):
        lb.tbr_reduce(sys, 0)
    with pytest.raises(ValueError):
        lb.tbr_reduce(sys, 5)
    red = lb.tbr_reduce(sys, 4)
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(red.sys.A)), np.sort(np.linalg.eigvals(sys.A)),
                               rtol=1e-8)


def test_full_order_tbr_reproduces_outputs():
    sys = random_stable(5, 2, 2, 3)
    rng = np.random.default_rng(0)
    u = rng.normal(size=(2, 41, 2))
    x0 = rng.normal(size=(2, 5))
    _, y = simulate_lti(sys, x0, u, 0.05, 40)
    y_red = lb.simulate_reduced(lb.tbr_reduce(sys, 5), x0, u, 0.05)
    np.testing.assert_allclose(y_red, y, atol=1e-9)


def test_shf_tbr_curve_monotone():
    shf = ShfModel()
    full = shf.as_lti()
    sys = LinearStateSpace(full.A, full.B, np.eye(16), np.zeros((16, 2)))
    rng = np.random.default_rng(0)
    u = rng.uniform(273.15, 473.15, (6, 1, 2)).repeat(101, axis=1)
    x0 = np.full((6, 16), 373.15)
    x, _ = simulate_lti(sys, x0, u, 0.01, 100)

    def metric(pred, truth):
        err = np.sqrt(((pred - truth) ** 2).mean(axis=(0, 1))) / np.abs(truth.mean(axis=(0, 1)))
        return {"rmse_mean_norm": err.mean(), "rmse_var_norm": 0.0, "max_error": np.abs(pred - truth).max()}

    rows = lb.tbr_curve(sys, x, u, 0.01, range(1, 17), metric)
    errs = [r["rmse_mean_norm"] for r in rows]
    assert all(b <= a * (1 + 1e-6) + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-9
    assert list(rows[0]) == lb.BASELINE_FIELDS


def test_dmdc_recovers_known_lti():
    Ad = np.array([[0.9, 0.1], [-0.2, 0.8]])
    Bd = np.array([[0.5], [1.0]])
    rng = np.random.default_rng(0)
    U = rng.normal(size=(1, 40))
    X = np.zeros((2, 41))
    X[:, 0] = [1.0, -1.0]
    for k in range(40):
        X[:, k + 1] = Ad @ X[:, k] + Bd @ U[:, k]
    res = lb.dmdc_fit(X[:, :-1], X[:, 1:], U, dt=0.1)
    assert res.rank == 3 and not res.rank_deficient
    np.testing.assert_allclose(res.sys.A, Ad, atol=1e-8)
    np.testing.assert_allclose(res.sys.B, Bd, atol=1e-8)
    assert res.sys.dt == 0.1


def test_dmd_without_controls():
    Ad = np.array([[0.95, 0.0], [0.1, 0.7]])
    X = np.zeros((2, 30))
    X[:, 0] = [1.0, 2.0]
    for k in range(29):
        X[:, k + 1] = Ad @ X[:, k]
    res = lb.dmdc_fit(X[:, :-1], X[:, 1:])
    assert res.sys.B.shape == (2, 0)
    np.testing.assert_allclose(res.sys.A, Ad, atol=1e-8)


def test_dmdc_rank_deficiency_reported():
    X = np.ones((2, 10))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = lb.dmdc_fit(X, X, rank=2)
    assert res.rank == 1 and res.rank_deficient
    assert any("numerical rank" in str(x.message) for x in w)
    with pytest.raises(ValueError):
        lb.dmdc_fit(X, X, rank=3)
    with pytest.raises(ValueError):
        lb.dmdc_fit(X, X[:, :-1])


@pytest.fixture(scope="module")
def shf_snapshots():
    sys = ShfModel().as_lti()
    rng = np.random.default_rng(1)
    u = rng.uniform(273.15, 473.15, (8, 501, 2))
    x0 = rng.uniform(273.15, 473.15, (8, 16))
    xs, _ = simulate_lti(sys, x0, u, 0.002, 500)
    X = xs[:, :-1].reshape(-1, 16).T
    Xp = xs[:, 1:].reshape(-1, 16).T
    U = u[:, :-1].reshape(-1, 2).T
    return sys, X, Xp, U


def test_dmdc_exact_on_shf(shf_snapshots):
    sys, X, Xp, U = shf_snapshots
    res = lb.dmdc_fit(X, Xp, U, dt=0.002)
    pred = res.sys.A @ X + res.sys.B @ U
    assert np.abs(pred - Xp).max() / np.abs(Xp).max() < 1e-8
    assert np.abs(pred - Xp).max() < 1e-6


def test_dmdc_continuous_spectrum_matches_shf(shf_snapshots):
    sys, X, Xp, U = shf_snapshots
    res = lb.dmdc_fit(X, Xp, U, dt=0.002)
    ev = lb.dmdc_continuous_eigenvalues(res)
    true = np.sort(np.linalg.eigvals(sys.A).real)[::-1]
    for lam in true[:3]:
        ok = ev[np.isfinite(ev)]
        assert np.min(np.abs(ok - lam)) / abs(lam) < 1e-3


def test_continuous_eigenvalues_flag_negative_axis():
    res = lb.DmdcResult(LinearStateSpace(np.diag([0.5, -0.3]), np.zeros((2, 0)), np.eye(2),
                                         np.zeros((2, 0)), dt=0.1), 2, 2, np.ones(2))
    ev = lb.dmdc_continuous_eigenvalues(res)
    assert np.isclose(ev[0], np.log(0.5) / 0.1) and np.isnan(ev[1])


def test_lifted_koopman_spectrum():
    ev = np.sort(lb.eigenvalues(KoopmanAnalyticModel().lifted_lti()).real)
    np.testing.assert_allclose(ev, [-1.0, -1.0, -0.5])
    with pytest.raises(ValueError):
        lb.eigenvalues(np.ones((2, 3)))


def test_restricted_eigenvalues():
    A = np.diag([-1.0, -2.0, -3.0])
    ev = lb.restricted_eigenvalues(A, np.array([True, False, True]), time_scale=0.5)
    np.testing.assert_allclose(np.sort(ev.real), [-6.0, -2.0])
    with pytest.raises(ValueError):
        lb.restricted_eigenvalues(A, np.zeros(3, bool))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 0), min_size=3, max_size=3),
       st.lists(st.floats(-5, 0), min_size=3, max_size=5))
def test_matching_is_minimum_cost(reference, learned):
    rows = lb.match_eigenvalues(learned, reference)
    assert len(rows) == 3
    total = sum(r["distance"] for r in rows)
    best = min(sum(abs(reference[i] - learned[j]) for i, j in enumerate(perm))
               for perm in itertools.permutations(range(len(learned)), 3))
    assert total == pytest.approx(best, abs=1e-9)


def test_matching_relative_error():
    rows = lb.match_eigenvalues([-0.52, -0.98, -1.05, -3.0], [-0.5, -1.0, -1.0])
    rel = sorted(r["relative"] for r in rows)
    np.testing.assert_allclose(rel, [0.02, 0.04, 0.05], atol=1e-12)
