"""Ground-truth systems: the stratified heat flow ladder and the Koopman toy system."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = ["LinearStateSpace", "ShfModel", "KoopmanAnalyticModel", "simulate_lti", "zoh_discretize"]


@dataclass(frozen=True)
class LinearStateSpace:
    """``x' = A x + B u``, ``y = C x + D u`` (or the discrete-time analogue when ``dt`` is set)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: float | None = None

    def __post_init__(self) -> None:
        A, B, C, D = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (self.A, self.B, self.C, self.D))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.size == 0:
            B = B.reshape(n, 0)
        m = B.shape[1]
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, A has {n}")
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} columns, A has {n}")
        p = C.shape[0]
        if D.size == 0:
            D = D.reshape(p, m)
        if D.shape != (p, m):
            raise ValueError(f"D must be {(p, m)}, got {D.shape}")
        for name, val in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, name, val)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    def rhs(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        dx = x @ self.A.T
        if self.n_inputs:
            dx = dx + u @ self.B.T
        return dx

    def output(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        y = x @ self.C.T
        if self.n_inputs:
            y = y + u @ self.D.T
        return y

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)


def zoh_discretize(sys: LinearStateSpace, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold map ``x_{k+1} = Ad x_k + Bd u_k``."""
    n, m = sys.n_states, sys.n_inputs
    M = np.zeros((n + m, n + m))
    M[:n, :n] = sys.A
    M[:n, n:] = sys.B
    E = scipy.linalg.expm(M * dt)
    return E[:n, :n], E[:n, n:]


def simulate_lti(sys: LinearStateSpace, x0: np.ndarray, u: np.ndarray | None, dt: float,
                 n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact simulation with inputs held per interval.

    ``x0`` is ``(batch, n)``, ``u`` is ``(batch, n_steps + 1, m)``; returns states
    ``(batch, n_steps + 1, n)`` and outputs ``(batch, n_steps + 1, p)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if sys.dt is None:
        Ad, Bd = zoh_discretize(sys, dt)
    else:
        Ad, Bd = sys.A, sys.B
    xs = np.empty((x0.shape[0], n_steps + 1, sys.n_states))
    xs[:, 0] = x0
    for k in range(n_steps):
        nxt = xs[:, k] @ Ad.T
        if sys.n_inputs:
            nxt += u[:, k] @ Bd.T
        xs[:, k + 1] = nxt
    ys = xs @ sys.C.T
    if sys.n_inputs:
        ys = ys + u[:, : n_steps + 1] @ sys.D.T
    return xs, ys


@dataclass(frozen=True)
class ShfModel:
    """Stratified heat flow: ``n_seg`` R2C1 segments between two boundary temperatures.

    Each segment carries ``C/n_seg`` and splits ``R/n_seg`` in half on both
    sides of its capacitance, so interior cells are linked through ``R/n_seg``
    and the outer cells reach the boundary through ``R/(2 n_seg)``.
    """

    R: float = 1.0
    C: float = 1.0
    n_seg: int = 16
    default_temperature: float = 373.15

    def __post_init__(self) -> None:
        if not (self.R > 0 and self.C > 0):
            raise ValueError("R and C must be positive")
        if self.n_seg < 2:
            raise ValueError("n_seg must be at least 2")

    n_controls = 2
    n_params = 0

    @property
    def n_states(self) -> int:
        return self.n_seg

    @property
    def n_outputs(self) -> int:
        return 3 * self.n_seg

    @property
    def R_i(self) -> float:
        return self.R / self.n_seg

    @property
    def C_i(self) -> float:
        return self.C / self.n_seg

    @property
    def state_names(self) -> list[str]:
        return [f"T_{i + 1}" for i in range(self.n_seg)]

    @property
    def output_names(self) -> list[str]:
        names = []
        for i in range(self.n_seg):
            names += [f"Q_left_{i + 1}", f"Q_right_{i + 1}", f"T_{i + 1}"]
        return names

    control_names = ("temperature_K_a", "temperature_K_b")

    def _link_resistances(self) -> np.ndarray:
        # n_seg + 1 links: boundary, interior..., boundary
        r = np.full(self.n_seg + 1, self.R_i)
        r[0] = r[-1] = self.R_i / 2
        return r

    def link_flows(self, T: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Heat flow through every link, positive from left to right, shape ``(..., n_seg + 1)``."""
        T = np.asarray(T, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        full = np.concatenate([u[..., :1], T, u[..., 1:2]], axis=-1)
        return (full[..., :-1] - full[..., 1:]) / self._link_resistances()

    def rhs(self, T: np.ndarray, u: np.ndarray) -> np.ndarray:
        T = np.asarray(T, dtype=np.float64)
        if T.shape[-1] != self.n_seg or np.shape(u)[-1] != 2:
            raise ValueError(f"expected {self.n_seg} temperatures and 2 boundary temperatures")
        q = self.link_flows(T, u)
        return (q[..., :-1] - q[..., 1:]) / self.C_i

    def outputs(self, T: np.ndarray, u: np.ndarray) -> np.ndarray:
        q = self.link_flows(T, u)
        T = np.asarray(T, dtype=np.float64)
        out = np.stack([q[..., :-1], q[..., 1:], T], axis=-1)
        return out.reshape(*T.shape[:-1], 3 * self.n_seg)

    def as_lti(self) -> LinearStateSpace:
        n = self.n_seg
        g = 1.0 / self._link_resistances()  # conductances
        A = np.zeros((n, n))
        for i in range(n):
            A[i, i] = -(g[i] + g[i + 1])
            if i > 0:
                A[i, i - 1] = g[i]
            if i < n - 1:
                A[i, i + 1] = g[i + 1]
        A /= self.C_i
        B = np.zeros((n, 2))
        B[0, 0] = g[0] / self.C_i
        B[-1, 1] = g[-1] / self.C_i
        C = np.zeros((3 * n, n))
        D = np.zeros((3 * n, 2))
        for i in range(n):
            # left link: from cell i-1 (or T_a) into cell i
            C[3 * i, i] = -g[i]
            if i > 0:
                C[3 * i, i - 1] = g[i]
            else:
                D[3 * i, 0] = g[0]
            # right link: from cell i into cell i+1 (or T_b)
            C[3 * i + 1, i] = g[i + 1]
            if i < n - 1:
                C[3 * i + 1, i + 1] = -g[i + 1]
            else:
                D[3 * i + 1, 1] = -g[-1]
            C[3 * i + 2, i] = 1.0
        return LinearStateSpace(A, B, C, D)

    def default_x0(self) -> np.ndarray:
        return np.full(self.n_seg, self.default_temperature)


@dataclass(frozen=True)
class KoopmanAnalyticModel:
    """``x1' = a x1``, ``x2' = b (x2 - x1^2)``; linear after adding ``x3 = x1^2``."""

    a: float = -0.5
    b: float = -1.0

    n_states = 2
    n_controls = 0
    n_outputs = 0
    n_params = 0
    state_names = ("x1", "x2")
    output_names = ()
    control_names = ()

    def rhs(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != 2:
            raise ValueError("Koopman analytic system has exactly two states")
        return np.stack([self.a * x[..., 0], self.b * (x[..., 1] - x[..., 0] ** 2)], axis=-1)

    def outputs(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        return np.zeros((*np.shape(x)[:-1], 0))

    def lifted_lti(self) -> LinearStateSpace:
        a, b = self.a, self.b
        A = np.array([[a, 0.0, 0.0], [0.0, b, -b], [0.0, 0.0, 2.0 * a]])
        C = np.eye(2, 3)
        return LinearStateSpace(A, np.zeros((3, 0)), C, np.zeros((2, 0)))

    @staticmethod
    def lift(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([x, x[..., :1] ** 2], axis=-1)

    def default_x0(self) -> np.ndarray:
        return np.zeros(2)


def shf_rhs(model: ShfModel, T: np.ndarray, u: np.ndarray) -> np.ndarray:
    return model.rhs(T, u)


def shf_as_lti(model: ShfModel) -> LinearStateSpace:
    return model.as_lti()


def koopman_rhs(model: KoopmanAnalyticModel, x: np.ndarray) -> np.ndarray:
    return model.rhs(x)


def koopman_lifted_lti(model: KoopmanAnalyticModel) -> LinearStateSpace:
    return model.lifted_lti()
