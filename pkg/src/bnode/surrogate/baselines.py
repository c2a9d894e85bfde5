"""Baselines: a state-space Neural ODE and a Latent ODE with inputs.

Both consume the raw (standardized) control vector inside the vector field.
The Latent ODE is stochastic only through its initial latent state, so its
KL term cannot penalize latent channels used at later times.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import diffcore as dc
from ..diffcore import DiffValue
from ..odeint import SolverConfig, TimeGrid, integrate
from . import _layers as L
from .bnode import Rollout, RolloutError
from .latent import GaussianLatent, gaussian_head, kl_per_channel, kl_value

__all__ = ["SsNodeConfig", "SsNodeModel", "LatentOdeConfig", "LatentOdeBaseline",
           "ssnode_loss", "latent_ode_loss", "latent_ode_trajectory_kl"]


@dataclass(frozen=True)
class SsNodeConfig:
    n_x: int
    n_u: int = 0
    n_p: int = 0
    n_y: int = 0
    hidden: int = 128
    n_layers: int = 4
    activation: str = "elu"
    time_scale: float = 1.0

    def __post_init__(self) -> None:
        if min(self.n_x, self.hidden, self.n_layers) < 1 or min(self.n_u, self.n_p, self.n_y) < 0:
            raise ValueError("invalid SS-NODE dimensions")
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SsNodeConfig":
        return cls(**d)


def _integrate_field(field_fn, s0: DiffValue, ctxs, T: int, dt: float, solver: SolverConfig,
                     train: bool) -> tuple[DiffValue, object]:
    """Shared integration for deterministic vector fields ``field_fn(s, ctx_i)``."""
    grid = TimeGrid.from_steps(T, dt)
    idx = list(range(T))
    if solver.method == "dopri5":
        if train:
            raise ValueError("dopri5 is inference only; train with euler or rk4")
        ctx_np = [c.data for c in ctxs]
        res = integrate(lambda t, s, i: field_fn(DiffValue(s), DiffValue(ctx_np[i])).data,
                        s0.data, grid, solver, idx)
        if not res.ok:
            raise RolloutError(f"state became non-finite at t={res.failed_at}", res.failed_at, res.n_rhs)
        return DiffValue(np.swapaxes(res.states, 0, 1)), res
    res = integrate(lambda t, s, i: field_fn(s, ctxs[i]), s0, grid, solver, idx)
    if not res.ok:
        raise RolloutError(f"state became non-finite at t={res.failed_at}", res.failed_at, res.n_rhs)
    return dc.stack(res.states, axis=1), res


class SsNodeModel:
    """``x' = f(x, u, p)``, ``y = g(x, u, p)`` directly on standardized states."""

    kind = "ssnode"

    def __init__(self, cfg: SsNodeConfig, seed: int | np.random.Generator = 0, stats=None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.cfg, self.stats = cfg, stats
        n_in = cfg.n_x + cfg.n_u + cfg.n_p
        self.f = dc.init_mlp(L.mlp_sizes(n_in, cfg.n_x, cfg.hidden, cfg.n_layers), cfg.activation, rng)
        self.g = (dc.init_mlp(L.mlp_sizes(n_in, cfg.n_y, cfg.hidden, cfg.n_layers), cfg.activation, rng)
                  if cfg.n_y else None)

    def named_parameters(self) -> dict[str, DiffValue]:
        named = self.f.named_parameters("dyn")
        if self.g is not None:
            named.update(self.g.named_parameters("out"))
        return named

    def parameters(self) -> list[DiffValue]:
        return list(self.named_parameters().values())

    def load_state(self, values: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters().items():
            if values[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {values[k].shape} != model shape {p.shape}")
            p.data = np.array(values[k], dtype=np.float64)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "config": self.cfg.to_json()}

    def latent_groups(self) -> dict[str, int]:
        return {}

    def rollout(self, x0, u, p, dt: float, solver: SolverConfig = SolverConfig(),
                train: bool = False, rng=None, **_) -> Rollout:
        c = self.cfg
        x0 = DiffValue(np.asarray(x0, dtype=np.float64))
        u = DiffValue(np.asarray(u, dtype=np.float64))
        p = DiffValue(np.asarray(p, dtype=np.float64))
        T = u.shape[1] - 1
        wx, wu, wp = L.row_blocks(self.f, (c.n_x, c.n_u, c.n_p))
        ctx = L.context(self.f, [(u if c.n_u else None, wu), (p if c.n_p else None, wp)])
        ctxs = L.interval_contexts(ctx, T)
        traj, res = _integrate_field(lambda s, k: L.forward_with_context(self.f, s, wx, k),
                                     x0, ctxs, T, dt / c.time_scale, solver, train)
        if self.g is not None:
            gx, gu, gp = L.row_blocks(self.g, (c.n_x, c.n_u, c.n_p))
            pt = dc.reshape(p, (p.shape[0], 1, c.n_p)) if c.n_p else None
            gctx = L.context(self.g, [(u if c.n_u else None, gu), (pt, gp)])
            y = L.forward_with_context(self.g, traj, gx, gctx)
        else:
            y = DiffValue(np.zeros((*traj.shape[:2], 0)))
        return Rollout(traj, y, traj, DiffValue(np.ones((traj.shape[0], 1, 0))), None, None,
                       res.n_rhs, res.n_steps)


def _mse(a: DiffValue, b: np.ndarray) -> DiffValue:
    if a.shape[-1] == 0:
        return DiffValue(0.0)
    return dc.mean(dc.square(a - b))


def ssnode_loss(model: SsNodeModel, x: np.ndarray, y: np.ndarray, ro: Rollout,
                beta: float = 0.0) -> tuple[DiffValue, dict[str, float]]:
    """``MSE(x_hat, x) + MSE(y_hat, y)``; ``beta`` is accepted and ignored."""
    rec_x, rec_y = _mse(ro.x, x), _mse(ro.y, y)
    loss = rec_x + rec_y
    return loss, {"loss": float(loss.data), "rec": float(loss.data), "rec_x": float(rec_x.data),
                  "rec_y": float(rec_y.data), "kl": 0.0, "kl_p": 0.0, "kl_u": 0.0, "kl_x": 0.0}


@dataclass(frozen=True)
class LatentOdeConfig:
    n_x: int
    n_u: int = 0
    n_p: int = 0
    n_y: int = 0
    lat_x: int = 16
    hidden: int = 128
    n_layers: int = 4
    activation: str = "elu"
    time_scale: float = 1.0

    def __post_init__(self) -> None:
        if min(self.n_x, self.lat_x, self.hidden, self.n_layers) < 1 or min(self.n_u, self.n_p, self.n_y) < 0:
            raise ValueError("invalid Latent ODE dimensions")
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "LatentOdeConfig":
        return cls(**d)


class LatentOdeBaseline:
    """Encoder on ``x0`` only; ``z' = f(z, u, p)``; decoder ``(z, u, p) -> (x, y)``."""

    kind = "latentode"

    def __init__(self, cfg: LatentOdeConfig, seed: int | np.random.Generator = 0, stats=None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.cfg, self.stats = cfg, stats
        c = cfg
        n_in = c.lat_x + c.n_u + c.n_p
        self.enc_x = dc.init_mlp(L.mlp_sizes(c.n_x, 2 * c.lat_x, c.hidden, c.n_layers), c.activation, rng)
        self.f = dc.init_mlp(L.mlp_sizes(n_in, c.lat_x, c.hidden, c.n_layers), c.activation, rng)
        self.dec = dc.init_mlp(L.mlp_sizes(n_in, c.n_x + c.n_y, c.hidden, c.n_layers), c.activation, rng)
        self.masks = {"x": np.ones(c.lat_x)}

    def named_parameters(self) -> dict[str, DiffValue]:
        named = self.enc_x.named_parameters("enc_x0")
        named.update(self.f.named_parameters("dyn"))
        named.update(self.dec.named_parameters("dec"))
        return named

    def parameters(self) -> list[DiffValue]:
        return list(self.named_parameters().values())

    load_state = SsNodeModel.load_state

    def descriptor(self) -> dict:
        return {"kind": self.kind, "config": self.cfg.to_json(),
                "masks": {k: v.tolist() for k, v in self.masks.items()}}

    def latent_groups(self) -> dict[str, int]:
        return {"x": self.cfg.lat_x}

    def encode_initial_state(self, x0) -> GaussianLatent:
        return gaussian_head(dc.mlp_forward(self.enc_x, x0), self.cfg.lat_x)

    def masked(self, masks: dict[str, np.ndarray]) -> "LatentOdeBaseline":
        """Copy sharing parameters where masked channels are held at 0 for ``t > 0``."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        m = np.asarray(masks.get("x", self.masks["x"]), dtype=np.float64)
        if m.shape != self.masks["x"].shape:
            raise ValueError("mask shape does not match the latent width")
        clone.masks = {"x": m.copy()}
        return clone

    def _propagate(self, z0: DiffValue, u: DiffValue, p: DiffValue, dt: float, solver, train):
        c = self.cfg
        T = u.shape[1] - 1
        wz, wu, wp = L.row_blocks(self.f, (c.lat_x, c.n_u, c.n_p))
        ctx = L.context(self.f, [(u if c.n_u else None, wu), (p if c.n_p else None, wp)])
        ctxs = L.interval_contexts(ctx, T)
        mask = self.masks["x"]
        traj, res = _integrate_field(
            lambda s, k: L.forward_with_context(self.f, L.apply_mask(s, mask), wz, k),
            z0, ctxs, T, dt / c.time_scale, solver, train)
        return traj, res

    def _decode(self, z: DiffValue, u: DiffValue, p: DiffValue) -> tuple[DiffValue, DiffValue]:
        c = self.cfg
        z = L.apply_mask(z, self.masks["x"])
        dz, du, dp = L.row_blocks(self.dec, (c.lat_x, c.n_u, c.n_p))
        pt = dc.reshape(p, (p.shape[0], 1, c.n_p)) if c.n_p else None
        ctx = L.context(self.dec, [(u if c.n_u else None, du), (pt, dp)])
        out = L.forward_with_context(self.dec, z, dz, ctx)
        return out[..., : c.n_x], out[..., c.n_x:]

    def rollout(self, x0, u, p, dt: float, solver: SolverConfig = SolverConfig(),
                train: bool = False, rng: np.random.Generator | None = None, **_) -> Rollout:
        """Only ``z0`` is sampled (train mode); the path after it is deterministic."""
        x0 = np.asarray(x0, dtype=np.float64)
        u = DiffValue(np.asarray(u, dtype=np.float64))
        p = DiffValue(np.asarray(p, dtype=np.float64))
        g0 = self.encode_initial_state(x0)
        if train:
            if rng is None:
                raise ValueError("train mode needs an rng")
            z0 = g0.sample(rng.standard_normal(g0.mu.shape))
        else:
            z0 = g0.mu
        traj, res = self._propagate(z0, u, p, dt, solver, train)
        x_hat, y_hat = self._decode(traj, u, p)
        return Rollout(x_hat, y_hat, traj, dc.reshape(g0.sigma, (g0.sigma.shape[0], 1, self.cfg.lat_x)),
                       None, None, res.n_rhs, res.n_steps, {"x0": g0})


def latent_ode_loss(model: LatentOdeBaseline, x: np.ndarray, y: np.ndarray, ro: Rollout,
                    beta: float) -> tuple[DiffValue, dict[str, float]]:
    """``1/2 (MSE_x + MSE_y) + beta * KL(q(z0|x0)) / (n_p + n_u + n_x)``."""
    c = model.cfg
    rec_x, rec_y = _mse(ro.x, x), _mse(ro.y, y)
    rec = 0.5 * (rec_x + rec_y)
    g0 = ro.extras["x0"]
    kl0 = dc.sum(kl_value(g0.mu, g0.sigma)) * (1.0 / g0.mu.shape[0])
    l_kl = kl0 * (1.0 / (c.n_p + c.n_u + c.n_x))
    loss = rec + beta * l_kl
    return loss, {"loss": float(loss.data), "rec": float(rec.data), "rec_x": float(rec_x.data),
                  "rec_y": float(rec_y.data), "kl": float(l_kl.data), "kl_p": 0.0, "kl_u": 0.0,
                  "kl_x": float(kl0.data)}


def latent_ode_trajectory_kl(model: LatentOdeBaseline, x0, u, p, dt: float,
                             solver: SolverConfig = SolverConfig(), n_draws: int = 32,
                             seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel KL of the latent path distribution, and of ``q(z0|x0)`` alone.

    The path distribution at each time is estimated from ``n_draws``
    propagated samples of ``z0`` (moment matching to a diagonal Gaussian).
    Returns ``(trajectory_kl, initial_kl)``, each averaged over samples (and
    time for the former).
    """
    if n_draws < 2:
        raise ValueError("need at least two draws to estimate a spread")
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    B = x0.shape[0]
    g0 = model.encode_initial_state(x0)
    mu0, s0 = g0.mu.data, g0.sigma.data
    init_kl = kl_per_channel(mu0, s0).mean(axis=0)
    eps = rng.standard_normal((n_draws, B, model.cfg.lat_x))
    z0 = (mu0 + eps * s0).reshape(n_draws * B, -1)
    rep = lambda a: np.broadcast_to(a, (n_draws, *a.shape)).reshape(n_draws * B, *a.shape[1:])
    traj, _ = model._propagate(DiffValue(z0), DiffValue(rep(u)), DiffValue(rep(p)), dt, solver, False)
    z = L.apply_mask(traj, model.masks["x"]).data.reshape(n_draws, B, *traj.shape[1:])
    mu = z.mean(axis=0)
    sd = np.maximum(z.std(axis=0, ddof=1), 1e-12)
    traj_kl = kl_per_channel(mu, sd).mean(axis=(0, 1))
    traj_kl[model.masks["x"] == 0] = 0.0  # pinned channels sit at the prior
    return traj_kl, init_kl
