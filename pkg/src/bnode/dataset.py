"""Trajectory datasets: control sampling, simulation, standardization, storage, windows."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .odeint import SolverConfig, TimeGrid, integrate_batched_adaptive

log = logging.getLogger(__name__)

__all__ = [
    "RrocsConfig", "SamplingSpec", "StandardizationStats", "TrajectoryDataset", "System",
    "sample_rrocs", "sample_steps", "generate_dataset", "standardize", "unstandardize",
    "window_samples", "window_at", "random_windows", "Window", "save_dataset", "load_dataset",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
_GROUPS = ("states", "outputs", "controls", "parameters")


class System(Protocol):
    n_states: int
    n_controls: int
    n_outputs: int
    n_params: int

    def rhs(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def outputs(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def default_x0(self) -> np.ndarray: ...


# --------------------------------------------------------------------------
# control signals


@dataclass(frozen=True)
class RrocsConfig:
    """Bounds ``[lower, upper]`` per channel and the knot frequency band in Hz."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    f_min: float = 2.0
    f_max: float = 20.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", tuple(float(v) for v in np.atleast_1d(self.lower)))
        object.__setattr__(self, "upper", tuple(float(v) for v in np.atleast_1d(self.upper)))
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper bounds need the same number of channels")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("every lower bound must be <= its upper bound")
        if not (0 < self.f_min <= self.f_max):
            raise ValueError("need 0 < f_min <= f_max")

    @property
    def n_channels(self) -> int:
        return len(self.lower)


def _rrocs_channel(rng: np.random.Generator, times: np.ndarray, lo: float, hi: float,
                   f_min: float, f_max: float) -> np.ndarray:
    t0, tT = times[0], times[-1]
    knots = [t0]
    while knots[-1] < tT:
        knots.append(knots[-1] + rng.uniform(1.0 / f_max, 1.0 / f_min))
    knots = np.asarray(knots)
    values = rng.uniform(lo, hi, knots.size)
    spline = CubicSpline(knots, values)(times)
    span = spline.max() - spline.min()
    norm = (spline - spline.min()) / span if span > 0 else np.zeros_like(spline)
    # offset and amplitude from two uniform draws: lands the band anywhere in range
    v1, v2 = rng.uniform(lo, hi, 2)
    b, delta = min(v1, v2), abs(v1 - v2)
    delta = min(delta, hi - b)
    return np.clip(b + norm * delta, lo, hi)


def sample_rrocs(cfg: RrocsConfig, grid: TimeGrid, n_samples: int, n_channels: int | None = None,
                 rngs: Sequence[np.random.Generator] | None = None) -> np.ndarray:
    """Randomly clipped random controls with offset and cubic splines.

    Returns ``(n_samples, len(grid), n_channels)``.  Each sample draws from its
    own generator (``rngs[i]``, default derived from ``cfg.seed`` and ``i``).
    """
    times = grid.times
    if times.size < 2:
        raise ValueError("control grid needs at least two points")
    n_channels = cfg.n_channels if n_channels is None else n_channels
    if n_channels != cfg.n_channels:
        raise ValueError(f"config has {cfg.n_channels} channels, {n_channels} requested")
    if rngs is None:
        rngs = [np.random.default_rng((cfg.seed, i)) for i in range(n_samples)]
    out = np.empty((n_samples, times.size, n_channels))
    for i in range(n_samples):
        for j in range(n_channels):
            out[i, :, j] = _rrocs_channel(rngs[i], times, cfg.lower[j], cfg.upper[j],
                                          cfg.f_min, cfg.f_max)
    return out


def sample_steps(lower: Sequence[float], upper: Sequence[float], grid: TimeGrid, n_samples: int,
                 rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """One step per channel at a random time between two uniform levels."""
    times = grid.times
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    out = np.empty((n_samples, times.size, lo.size))
    for i in range(n_samples):
        rng = rngs[i]
        for j in range(lo.size):
            before, after = rng.uniform(lo[j], hi[j], 2)
            t_step = rng.uniform(times[0], times[-1])
            out[i, :, j] = np.where(times < t_step, before, after)
    return out


# --------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class StandardizationStats:
    """Frozen per-channel mean and std for each variable group."""

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    @classmethod
    def compute(cls, groups: dict[str, np.ndarray]) -> "StandardizationStats":
        """Parameters are reduced over samples; time series over samples and time."""
        mean, std = {}, {}
        for name, arr in groups.items():
            a = np.asarray(arr, dtype=np.float64)
            axes = tuple(range(a.ndim - 1))
            if a.shape[-1] == 0 or a.size == 0:
                mean[name] = np.zeros(a.shape[-1])
                std[name] = np.ones(a.shape[-1])
                continue
            m = a.mean(axis=axes)
            s = a.std(axis=axes)
            s = np.where(s > 0, s, 1.0)  # degenerate channels pass through unscaled
            mean[name], std[name] = m, s
        return cls(mean, std)

    def to_json(self) -> dict:
        return {k: {"mean": self.mean[k].tolist(), "std": self.std[k].tolist()} for k in self.mean}

    @classmethod
    def from_json(cls, payload: dict) -> "StandardizationStats":
        return cls({k: np.asarray(v["mean"], float) for k, v in payload.items()},
                   {k: np.asarray(v["std"], float) for k, v in payload.items()})


def standardize(stats: StandardizationStats, group: str, x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean[group]) / stats.std[group]


def unstandardize(stats: StandardizationStats, group: str, x_std: np.ndarray) -> np.ndarray:
    return np.asarray(x_std, dtype=np.float64) * stats.std[group] + stats.mean[group]


# --------------------------------------------------------------------------
# dataset container


@dataclass
class TrajectoryDataset:
    states: np.ndarray       # (N, T+1, n_x)
    outputs: np.ndarray      # (N, T+1, n_y)
    controls: np.ndarray     # (N, T+1, n_u)
    parameters: np.ndarray   # (N, n_p)
    times: np.ndarray        # (T+1,)
    splits: np.ndarray       # (N,) of "train" / "val" / "test"
    stats: StandardizationStats
    names: dict[str, list[str]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n, t1 = self.states.shape[:2]
        for name in ("outputs", "controls"):
            arr = getattr(self, name)
            if arr.shape[:2] != (n, t1):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n}, {t1}, ...)")
        if self.parameters.shape[0] != n or self.times.shape != (t1,) or self.splits.shape != (n,):
            raise ValueError("parameters, times or split labels do not match the states")
        if not set(np.unique(self.splits)) <= set(SPLITS):
            raise ValueError(f"split labels must be among {SPLITS}")
        for name in _GROUPS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        """Number of intervals; sequences hold ``T + 1`` points."""
        return self.states.shape[1] - 1

    @property
    def dt(self) -> float:
        return float(self.config.get("dt", self.times[1] - self.times[0]))

    @property
    def dims(self) -> dict[str, int]:
        return {"n_x": self.states.shape[-1], "n_y": self.outputs.shape[-1],
                "n_u": self.controls.shape[-1], "n_p": self.parameters.shape[-1]}

    def indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(self.n_samples)
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.splits == split)

    def split_counts(self) -> dict[str, int]:
        return {s: int((self.splits == s).sum()) for s in SPLITS}

    def standardized(self, split: str = "all") -> dict[str, np.ndarray]:
        """float64 standardized arrays for a split."""
        idx = self.indices(split)
        return {g: standardize(self.stats, g, getattr(self, g)[idx]) for g in _GROUPS}

    def subset(self, split: str) -> "TrajectoryDataset":
        idx = self.indices(split)
        return TrajectoryDataset(self.states[idx], self.outputs[idx], self.controls[idx],
                                 self.parameters[idx], self.times, self.splits[idx], self.stats,
                                 self.names, self.config)


def assign_splits(n: int, fractions: dict[str, float], seed: int) -> np.ndarray:
    """Deterministic partition: rounded train/test counts, remainder to validation."""
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_train = int(round(fractions.get("train", 0.0) * n))
    n_test = int(round(fractions.get("test", 0.0) * n))
    n_test = min(n_test, n - n_train)
    labels = np.array(["val"] * n, dtype=object)
    perm = np.random.default_rng((seed, 0x5911)).permutation(n)
    labels[perm[:n_train]] = "train"
    labels[perm[n_train:n_train + n_test]] = "test"
    return labels.astype(str)


DEFAULT_SPLIT = {"train": 0.76, "test": 0.12, "val": 0.12}


@dataclass(frozen=True)
class SamplingSpec:
    """What to draw and how long to simulate.

    ``drop_prefix`` seconds at the start are simulated but not stored.
    Unsampled initial states use the system default.
    """

    n_samples: int
    t_stop: float
    dt: float
    t_start: float = 0.0
    drop_prefix: float = 0.0
    x0_lower: tuple[float, ...] | None = None
    x0_upper: tuple[float, ...] | None = None
    controls: RrocsConfig | None = None
    control_kind: str = "rrocs"

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if (self.x0_lower is None) != (self.x0_upper is None):
            raise ValueError("give both x0 bounds or neither")
        if self.x0_lower is not None and any(
                lo > hi for lo, hi in zip(self.x0_lower, self.x0_upper)):
            raise ValueError("every x0 lower bound must be <= its upper bound")
        if self.control_kind not in ("rrocs", "step"):
            raise ValueError("control_kind must be 'rrocs' or 'step'")
        if self.drop_prefix < 0 or self.drop_prefix >= self.t_stop - self.t_start:
            raise ValueError("drop_prefix must lie inside the simulated horizon")

    @property
    def sim_grid(self) -> TimeGrid:
        return TimeGrid(self.t_start, self.t_stop, self.dt)

    @property
    def n_drop(self) -> int:
        return int(round(self.drop_prefix / self.dt))

    def to_json(self) -> dict:
        d = asdict(self)
        return d


def _draw_sample_inputs(system: System, spec: SamplingSpec, rng: np.random.Generator,
                        grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    if spec.x0_lower is not None:
        x0 = rng.uniform(np.asarray(spec.x0_lower, float), np.asarray(spec.x0_upper, float))
    else:
        x0 = np.asarray(system.default_x0(), dtype=np.float64)
    if system.n_controls == 0:
        u = np.zeros((len(grid), 0))
    elif spec.controls is None:
        raise ValueError("system has control inputs but no control sampling was configured")
    elif spec.control_kind == "step":
        u = sample_steps(spec.controls.lower, spec.controls.upper, grid, 1, [rng])[0]
    else:
        u = sample_rrocs(spec.controls, grid, 1, rngs=[rng])[0]
    return x0, u


def _simulate(system: System, x0: np.ndarray, u: np.ndarray, grid: TimeGrid, solver: SolverConfig):
    inputs = np.moveaxis(u, 1, 0)  # (T+1, batch, m)
    res = integrate_batched_adaptive(lambda t, x, ui: system.rhs(x, ui), x0, grid, solver, inputs)
    return res


def generate_dataset(system: System, spec: SamplingSpec,
                     solver: SolverConfig = SolverConfig("dopri5", rtol=1e-6, atol=1e-8),
                     fractions: dict[str, float] | None = None, seed: int = 0,
                     max_retries: int = 3, chunk_size: int = 256) -> TrajectoryDataset:
    """Sample inputs, simulate, drop the transient prefix and assign splits.

    Sample ``i`` uses the generator ``default_rng((seed, i, attempt))`` so each
    sample is reproducible on its own.  Samples whose simulation fails are
    redrawn up to ``max_retries`` times.
    """
    fractions = DEFAULT_SPLIT if fractions is None else fractions
    grid = spec.sim_grid
    n, T1 = spec.n_samples, len(grid)
    x0s = np.empty((n, system.n_states))
    us = np.empty((n, T1, system.n_controls))
    for i in range(n):
        x0s[i], us[i] = _draw_sample_inputs(system, spec, np.random.default_rng((seed, i, 0)), grid)

    states = np.empty((n, T1, system.n_states))
    for start in range(0, n, chunk_size):
        sl = slice(start, min(start + chunk_size, n))
        res = _simulate(system, x0s[sl], us[sl], grid, solver)
        if res.ok:
            states[sl] = np.moveaxis(res.states, 0, 1)
            continue
        for i in range(sl.start, sl.stop):
            for attempt in range(max_retries + 1):
                if attempt:
                    x0s[i], us[i] = _draw_sample_inputs(
                        system, spec, np.random.default_rng((seed, i, attempt)), grid)
                one = _simulate(system, x0s[i:i + 1], us[i:i + 1], grid, solver)
                if one.ok:
                    states[i] = one.states[:, 0]
                    break
                log.warning("sample %d failed at t=%s (attempt %d)", i, one.failed_at, attempt)
            else:
                raise RuntimeError(f"sample {i} failed to integrate after {max_retries} retries")

    outputs = system.outputs(states, us)
    k = spec.n_drop
    states, outputs, us = states[:, k:], outputs[:, k:], us[:, k:]
    times = grid.times[k:]
    params = np.zeros((n, system.n_params))
    splits = assign_splits(n, fractions, seed)

    states32, outputs32, us32, params32 = (a.astype(np.float32) for a in (states, outputs, us, params))
    train = splits == "train"
    stats = StandardizationStats.compute({
        "states": states32[train], "outputs": outputs32[train],
        "controls": us32[train], "parameters": params32[train]})
    names = {
        "states": list(getattr(system, "state_names", [])),
        "outputs": list(getattr(system, "output_names", [])),
        "controls": list(getattr(system, "control_names", [])),
        "parameters": [],
    }
    sys_params = asdict(system) if is_dataclass(system) else {}
    config = {"system": type(system).__name__, "system_params": sys_params, "seed": seed, "dt": spec.dt,
              "t0": float(times[0]), "sampling": spec.to_json(),
              "solver": asdict(solver), "fractions": dict(fractions)}
    return TrajectoryDataset(states32, outputs32, us32, params32, times.astype(np.float32),
                             splits, stats, names, config)


# --------------------------------------------------------------------------
# on-disk format: manifest.json + one raw little-endian float32 file per array


def save_dataset(ds: TrajectoryDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name in (*_GROUPS, "times"):
        arr = np.ascontiguousarray(getattr(ds, name), dtype="<f4")
        (directory / f"{name}.bin").write_bytes(arr.tobytes(order="C"))
        arrays[name] = {"file": f"{name}.bin", "shape": list(arr.shape)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "layout": "row-major",
        "arrays": arrays,
        "splits": ds.splits.tolist(),
        "standardization": ds.stats.to_json(),
        "names": ds.names,
        "generator": ds.config,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_dataset(directory: str | Path) -> TrajectoryDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {manifest.get('format_version')}")
    arrs = {}
    for name, meta in manifest["arrays"].items():
        raw = (directory / meta["file"]).read_bytes()
        arrs[name] = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).astype(np.float32)
    return TrajectoryDataset(
        arrs["states"], arrs["outputs"], arrs["controls"], arrs["parameters"], arrs["times"],
        np.asarray(manifest["splits"], dtype=str),
        StandardizationStats.from_json(manifest["standardization"]),
        manifest.get("names", {}), manifest.get("generator", {}))


# --------------------------------------------------------------------------
# moving windows


@dataclass
class Window:
    """``x0 = x_j``, targets ``x_{j:j+tau}``, ``u_{j:j+tau}``, ``y_{j:j+tau}`` (standardized)."""

    x0: np.ndarray
    p: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray

    @property
    def tau(self) -> int:
        return self.x.shape[-2] - 1


def window_at(arrays: dict[str, np.ndarray], seq: np.ndarray | int, j: np.ndarray | int,
              tau: int) -> Window:
    """Gather window(s) starting at index ``j`` of sequence(s) ``seq``.

    Vectorized: ``seq`` and ``j`` may be index arrays of equal length.
    """
    offs = np.arange(tau + 1)
    seq = np.asarray(seq)
    rows = np.asarray(j)[..., None] + offs
    s = seq[..., None]
    x = arrays["states"][s, rows]
    return Window(x0=x[..., 0, :], p=arrays["parameters"][seq], x=x,
                  u=arrays["controls"][s, rows], y=arrays["outputs"][s, rows])


def _check_tau(T: int, tau: int) -> None:
    if not 1 <= tau < T:
        raise ValueError(f"training sequence length tau={tau} must satisfy 1 <= tau < T={T}")


def window_samples(ds: TrajectoryDataset, tau: int, split: str = "train") -> Iterator[Window]:
    """All ``T - tau`` windows of every sequence in a split, produced lazily."""
    _check_tau(ds.T, tau)
    arrays = ds.standardized(split)
    for s in range(arrays["states"].shape[0]):
        for j in range(ds.T - tau):
            yield window_at(arrays, s, j, tau)


def random_windows(arrays: dict[str, np.ndarray], tau: int, batch_size: int,
                   rng: np.random.Generator) -> Window:
    """A batch of windows drawn uniformly over (sequence, start) pairs."""
    n, T1 = arrays["states"].shape[:2]
    _check_tau(T1 - 1, tau)
    flat = rng.integers(0, n * (T1 - 1 - tau), size=batch_size)
    seq, j = np.divmod(flat, T1 - 1 - tau)
    return window_at(arrays, seq, j, tau)
