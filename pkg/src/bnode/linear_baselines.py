"""Classical linear comparisons: truncated balanced realization and DMD with control."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .physics import LinearStateSpace, simulate_lti

__all__ = [
    "ReducedLti", "balance", "tbr_reduce", "lyapunov_residual", "DmdcResult", "dmdc_fit",
    "dmdc_continuous_eigenvalues", "eigenvalues", "restricted_eigenvalues", "match_eigenvalues",
    "simulate_reduced", "tbr_curve", "BASELINE_FIELDS",
]

LYAP_TOL = 1e-8
BASELINE_FIELDS = ["method", "order", "rmse_mean_norm", "rmse_var_norm", "max_error"]


def lyapunov_residual(A: np.ndarray, X: np.ndarray, W: np.ndarray) -> float:
    """Relative residual of ``A X + X A^T + W = 0``."""
    R = A @ X + X @ A.T + W
    scale = 2.0 * np.linalg.norm(A) * np.linalg.norm(X) + np.linalg.norm(W)
    return float(np.linalg.norm(R) / max(scale, np.finfo(float).tiny))


def _solve_lyap(A: np.ndarray, W: np.ndarray) -> np.ndarray:
    X = scipy.linalg.solve_continuous_lyapunov(A, -W)
    X = 0.5 * (X + X.T)
    res = lyapunov_residual(A, X, W)
    if res > LYAP_TOL:
        raise np.linalg.LinAlgError(f"Lyapunov residual {res:.3e} exceeds {LYAP_TOL:g}")
    return X


def _sqrt_factor(M: np.ndarray) -> np.ndarray:
    """``L`` with ``M = L L^T``; Cholesky, or a symmetric eigen factor if M is singular."""
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(M)
        return V * np.sqrt(np.clip(w, 0.0, None))


def _check_hurwitz(A: np.ndarray) -> None:
    ev = np.linalg.eigvals(A)
    if not np.all(ev.real < 0):
        raise ValueError(f"A is not Hurwitz (max real part {ev.real.max():.3g})")


def balance(sys: LinearStateSpace) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Square-root balancing.

    Returns ``(hsv, T, T_inv, P, Q)`` with ``x = T z``; the balanced gramians
    ``T_inv P T_inv^T`` and ``T^T Q T`` both equal ``diag(hsv)``.
    """
    if sys.dt is not None:
        raise ValueError("balancing expects a continuous-time system")
    A = sys.A
    _check_hurwitz(A)
    P = _solve_lyap(A, sys.B @ sys.B.T)
    Q = _solve_lyap(A.T, sys.C.T @ sys.C)
    Lc, Lo = _sqrt_factor(P), _sqrt_factor(Q)
    U, s, Vt = np.linalg.svd(Lo.T @ Lc)
    if s[-1] <= s[0] * 1e-14:
        # tiny Hankel values: keep the transform finite, the truncation discards them anyway
        s_safe = np.maximum(s, s[0] * 1e-14)
    else:
        s_safe = s
    root = np.sqrt(s_safe)
    T = Lc @ Vt.T / root
    T_inv = (U / root).T @ Lo.T
    return s, T, T_inv, P, Q


@dataclass(frozen=True)
class ReducedLti:
    sys: LinearStateSpace
    order: int
    hsv: np.ndarray
    T: np.ndarray       # (n, r): z -> x
    T_inv: np.ndarray   # (r, n): x -> z

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.T_inv.T

    def lift(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.T.T


def tbr_reduce(sys: LinearStateSpace, r: int) -> ReducedLti:
    """Keep the ``r`` states with the largest Hankel singular values."""
    n = sys.n_states
    if not 1 <= r <= n:
        raise ValueError(f"order r={r} must lie in [1, {n}]")
    hsv, T, T_inv, _, _ = balance(sys)
    Tr, Tir = T[:, :r], T_inv[:r]
    red = LinearStateSpace(Tir @ sys.A @ Tr, Tir @ sys.B, sys.C @ Tr, sys.D)
    return ReducedLti(red, r, hsv, Tr, Tir)


def simulate_reduced(red: ReducedLti, x0: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Outputs of the reduced model from full initial states ``(B, n)`` and inputs ``(B, T+1, m)``."""
    z0 = red.project(x0)
    _, ys = simulate_lti(red.sys, z0, u, dt, u.shape[1] - 1)
    return ys


def tbr_curve(sys: LinearStateSpace, x: np.ndarray, u: np.ndarray, dt: float,
              orders, metric) -> list[dict]:
    """Reduced-order error for each order; ``metric(pred, truth)`` returns a dict."""
    rows = []
    for r in orders:
        red = tbr_reduce(sys, r)
        m = metric(simulate_reduced(red, x[:, 0], u, dt), x)
        rows.append({"method": "tbr", "order": r, **{k: m[k] for k in BASELINE_FIELDS[2:]}})
    return rows


@dataclass(frozen=True)
class DmdcResult:
    sys: LinearStateSpace
    rank: int
    requested_rank: int
    singular_values: np.ndarray

    @property
    def rank_deficient(self) -> bool:
        return self.rank < self.requested_rank


def dmdc_fit(X: np.ndarray, Xp: np.ndarray, U: np.ndarray | None = None, rank: int | None = None,
             dt: float = 1.0) -> DmdcResult:
    """Least-squares ``[A B] = X' pinv([X; U])`` with SVD truncation.

    Snapshots are columns: ``X`` and ``Xp`` are ``(n, m)``, ``U`` is
    ``(q, m)``.  If the stacked snapshot matrix has numerical rank below the
    requested one, the effective rank is used and reported.
    """
    X = np.asarray(X, dtype=np.float64)
    Xp = np.asarray(Xp, dtype=np.float64)
    if X.shape != Xp.shape:
        raise ValueError(f"X {X.shape} and X' {Xp.shape} are not aligned")
    n, m = X.shape
    U = np.zeros((0, m)) if U is None else np.asarray(U, dtype=np.float64)
    if U.shape[1] != m:
        raise ValueError("U must have one column per snapshot")
    q = U.shape[0]
    omega = np.vstack([X, U])
    full = min(omega.shape)
    r_req = full if rank is None else int(rank)
    if not 1 <= r_req <= full:
        raise ValueError(f"rank {r_req} must lie in [1, {full}]")
    Uo, s, Vt = np.linalg.svd(omega, full_matrices=False)
    tol = max(omega.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    r_eff = min(r_req, int((s > tol).sum()))
    if r_eff < r_req:
        warnings.warn(f"snapshot matrix has numerical rank {r_eff} < requested {r_req}", RuntimeWarning)
    G = (Xp @ Vt[:r_eff].T / s[:r_eff]) @ Uo[:, :r_eff].T
    A, B = G[:, :n], G[:, n:]
    sys = LinearStateSpace(A, B.reshape(n, q), np.eye(n), np.zeros((n, q)), dt=dt)
    return DmdcResult(sys, r_eff, r_req, s)


def dmdc_continuous_eigenvalues(res: DmdcResult) -> np.ndarray:
    """Continuous-time spectrum ``log(lambda_d) / dt`` of a discrete fit (diagnostic only).

    This is the spectrum of the principal matrix logarithm.  Eigenvalues on
    the closed negative real axis have no real logarithm; they come back as
    NaN instead of silently picking a branch.
    """
    ev = np.linalg.eigvals(res.sys.A).astype(complex)
    bad = (np.abs(ev.imag) <= 1e-12 * np.maximum(1.0, np.abs(ev))) & (ev.real <= 0)
    out = np.full(ev.shape, np.nan + 0j)
    out[~bad] = np.log(ev[~bad]) / res.sys.dt
    return out


def eigenvalues(M) -> np.ndarray:
    """Full complex spectrum of a square matrix or of ``sys.A``."""
    A = M.A if isinstance(M, LinearStateSpace) else np.asarray(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("eigenvalues need a square matrix")
    return np.linalg.eigvals(A)


def restricted_eigenvalues(A: np.ndarray, active: np.ndarray, time_scale: float = 1.0) -> np.ndarray:
    """Spectrum of ``A`` restricted to the active channels, in physical time units."""
    active = np.asarray(active, dtype=bool)
    if not active.any():
        raise ValueError("no active channels to restrict to")
    sub = np.asarray(A)[np.ix_(active, active)]
    return np.linalg.eigvals(sub) / time_scale


def match_eigenvalues(learned, reference) -> list[dict]:
    """Minimum-cost bipartite matching on ``|lambda_learned - lambda_ref|``.

    Every reference eigenvalue gets a partner when there are at least as many
    learned ones.  Rows carry the absolute and relative distance.
    """
    learned = np.asarray(learned, dtype=complex).ravel()
    reference = np.asarray(reference, dtype=complex).ravel()
    cost = np.abs(reference[:, None] - learned[None, :])
    ri, li = linear_sum_assignment(cost)
    rows = []
    for r, l in zip(ri, li):
        d = float(cost[r, l])
        rows.append({"reference": reference[r], "learned": learned[l], "distance": d,
                     "relative": d / max(abs(reference[r]), np.finfo(float).tiny)})
    return rows
