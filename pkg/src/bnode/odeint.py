"""Fixed-step and adaptive explicit Runge-Kutta integration on an output grid.

Inputs are piecewise constant: ``inputs[i]`` is held on ``[t_i, t_{i+1}]`` and
handed to the right-hand side as its third argument.  Because an input may
jump at every grid point, every method lands exactly on each grid point and
restarts there.

``euler`` and ``rk4`` only use ``+``, ``-`` and scalar ``*`` on the state, so
they run unchanged on :class:`bnode.diffcore.DiffValue` states; that is the
differentiable (unrolled) path used for training.  ``dopri5`` works on plain
numpy arrays and is meant for data generation and evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "TimeGrid", "SolverConfig", "IntegrationResult", "IntegrationError",
    "integrate", "integrate_batched_adaptive",
]

Rhs = Callable[[float, Any, Any], Any]

METHODS = ("euler", "rk4", "dopri5")


class IntegrationError(RuntimeError):
    """Adaptive integration could not finish within its step budget."""


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant output grid ``t0, t0 + dt, ..., tT``."""

    t0: float
    tT: float
    dt: float

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("output interval must be positive")
        if not self.tT > self.t0:
            raise ValueError("grid must be strictly increasing (tT > t0)")
        ratio = (self.tT - self.t0) / self.dt
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise ValueError(f"(tT - t0) / dt = {ratio} is not an integer")

    @classmethod
    def from_steps(cls, n_steps: int, dt: float, t0: float = 0.0) -> "TimeGrid":
        return cls(t0, t0 + n_steps * dt, dt)

    @property
    def n_steps(self) -> int:
        return int(round((self.tT - self.t0) / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def __len__(self) -> int:
        return self.n_steps + 1


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    substeps: int = 1
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 1_000_000

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class IntegrationResult:
    """States at the grid points reached.

    ``states`` is a stacked array for numpy states and a list for
    ``DiffValue`` states.  ``failed_at`` is the time at which a non-finite
    state appeared; the trajectory then ends at the last finite grid point.
    """

    states: Any
    times: np.ndarray
    n_rhs: int = 0
    n_steps: int = 0
    n_rejected: int = 0
    failed_at: float | None = None
    step_sizes: list[float] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.failed_at is None


def _data(x) -> np.ndarray:
    return x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else np.asarray(x)


def _input(inputs, i):
    return None if inputs is None else inputs[i]


def _fixed_step(rhs: Rhs, x, t: float, h: float, u, method: str):
    if method == "euler":
        return x + h * rhs(t, x, u), 1
    k1 = rhs(t, x, u)
    k2 = rhs(t + 0.5 * h, x + (0.5 * h) * k1, u)
    k3 = rhs(t + 0.5 * h, x + (0.5 * h) * k2, u)
    k4 = rhs(t + h, x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 4


def integrate(rhs: Rhs, x0, grid: TimeGrid, cfg: SolverConfig = SolverConfig(),
              inputs: Sequence | None = None) -> IntegrationResult:
    """Integrate ``x' = rhs(t, x, u_i)`` and report states on ``grid``.

    ``x0`` may be a numpy array (any leading batch shape) or a ``DiffValue``
    for the fixed-step methods.  For ``dopri5`` a batch is integrated with one
    shared step sequence, see :func:`integrate_batched_adaptive`.
    """
    if not np.all(np.isfinite(_data(x0))):
        raise ValueError("initial state is not finite")
    if inputs is not None and len(inputs) < grid.n_steps:
        raise ValueError(f"need {grid.n_steps} interval inputs, got {len(inputs)}")
    if cfg.method == "dopri5":
        return _dopri5(rhs, np.asarray(x0, dtype=np.float64), grid, cfg, inputs)

    diff = not isinstance(x0, np.ndarray) and hasattr(x0, "data")
    x = x0 if diff else np.asarray(x0, dtype=np.float64)
    h = grid.dt / cfg.substeps
    times = grid.times
    states = [x]
    n_rhs = n_steps = 0
    failed_at = None
    for i in range(grid.n_steps):
        u = _input(inputs, i)
        xi = x
        for s in range(cfg.substeps):
            xi, evals = _fixed_step(rhs, xi, times[i] + s * h, h, u, cfg.method)
            n_rhs += evals
            n_steps += 1
        if not np.all(np.isfinite(_data(xi))):
            failed_at = float(times[i + 1])
            break
        x = xi
        states.append(x)
    out = states if diff else np.stack(states)
    return IntegrationResult(out, times[: len(states)], n_rhs, n_steps, 0, failed_at)


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

_SAFETY, _FAC_MIN, _FAC_MAX = 0.9, 0.2, 5.0


def _error_norm(err: np.ndarray, y0: np.ndarray, y1: np.ndarray, rtol: float, atol: float) -> float:
    """Worst per-sample RMS of the scaled error; the whole batch shares one step."""
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    ratio = (err / scale) ** 2
    if ratio.ndim <= 1:
        return float(np.sqrt(ratio.mean()))
    per_sample = np.sqrt(ratio.reshape(ratio.shape[0], -1).mean(axis=1))
    return float(per_sample.max())


def _dopri5(rhs: Rhs, x0: np.ndarray, grid: TimeGrid, cfg: SolverConfig,
            inputs: Sequence | None) -> IntegrationResult:
    times = grid.times
    states = [x0]
    x = x0
    h = grid.dt
    n_rhs = n_steps = n_rejected = 0
    steps: list[float] = []
    for i in range(grid.n_steps):
        u = _input(inputs, i)
        t, t_end = times[i], times[i + 1]
        k1 = rhs(t, x, u)
        n_rhs += 1
        h = min(h, t_end - t)
        while t < t_end - 1e-12 * grid.dt:
            if n_steps + n_rejected >= cfg.max_steps:
                raise IntegrationError(
                    f"dopri5 exceeded {cfg.max_steps} steps at t={t:.6g}")
            last = t + h >= t_end - 1e-12 * grid.dt
            if last:
                h = t_end - t
            ks = [k1]
            for s in range(1, 7):
                xs = x + h * sum(a * k for a, k in zip(_A[s], ks) if a != 0.0)
                ks.append(rhs(t + _C[s] * h, xs, u))
            n_rhs += 6
            x_new = x + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
            err = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
            if not np.all(np.isfinite(x_new)):
                enorm = math.inf
            else:
                enorm = _error_norm(err, x, x_new, cfg.rtol, cfg.atol)
            if enorm <= 1.0:
                t = t_end if last else t + h
                x = x_new
                k1 = ks[6]
                n_steps += 1
                steps.append(h)
                fac = _FAC_MAX if enorm == 0.0 else min(_FAC_MAX, max(_FAC_MIN, _SAFETY * enorm ** -0.2))
                h_next = h * fac
                if last:
                    h = h_next
                    break
                h = min(h_next, t_end - t)
            else:
                n_rejected += 1
                if not np.isfinite(enorm):
                    h *= _FAC_MIN
                else:
                    h *= max(_FAC_MIN, _SAFETY * enorm ** -0.2)
                if h < 1e-14 * max(1.0, abs(t)):
                    return IntegrationResult(np.stack(states), times[: len(states)], n_rhs,
                                             n_steps, n_rejected, float(t), steps)
        states.append(x)
    return IntegrationResult(np.stack(states), times, n_rhs, n_steps, n_rejected, None, steps)


def integrate_batched_adaptive(rhs: Rhs, x0: np.ndarray, grid: TimeGrid,
                               cfg: SolverConfig = SolverConfig(method="dopri5"),
                               inputs: Sequence | None = None) -> IntegrationResult:
    """dopri5 over a batch ``x0[b, ...]`` with one shared step sequence.

    The acceptance test uses the worst sample's error, so one hard sample
    drives the step size for all.  Returned states have shape
    ``(T+1, batch, ...)``; ``n_rhs`` counts batched right-hand-side calls.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim < 2:
        raise ValueError("batched integration expects x0 of shape (batch, n)")
    if cfg.method != "dopri5":
        cfg = SolverConfig("dopri5", cfg.substeps, cfg.rtol, cfg.atol, cfg.max_steps)
    return integrate(rhs, x0, grid, cfg, inputs)
