"""Balanced Neural ODE: a VAE whose latent state distribution is advanced by an ODE.

Four variants share encoders and decoder and differ only in the latent
vector field:

``const-var``      mu' = f(mu*, u^z, p^z), sigma' = 0
``dyn-var``        mu' = f_mu(mu*, u^z, p^z), sigma' = f_sigma(mu*, sigma*, u^z, p^z)
``koopman-const``  mu' = A_mm mu* + B_mu u^z, sigma' = 0
``koopman-dyn``    additionally sigma' = A_sm mu* + A_ss sigma* + B_su u^z

In train mode the ODE sees ``mu* = mu + eps * sigma`` and
``sigma* = sigma + alpha_sigma * eps' * sigma`` with noise re-drawn at every
right-hand-side evaluation (or once per output interval, see
``BNodeConfig.noise_per_rhs``).  In inference mode every ``eps`` is zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import diffcore as dc
from ..diffcore import DiffValue, MlpParams
from ..odeint import SolverConfig, TimeGrid, integrate
from . import _layers as L
from .latent import GaussianLatent, gaussian_head, kl_value

__all__ = ["VARIANTS", "BNodeConfig", "BNodeModel", "Rollout", "RolloutError", "SigmaError", "elbo_loss"]

VARIANTS = ("const-var", "dyn-var", "koopman-const", "koopman-dyn")


class RolloutError(RuntimeError):
    """The latent ODE produced a non-finite state; carries where it happened."""

    def __init__(self, message: str, failed_at: float | None = None, n_rhs: int = 0):
        super().__init__(message)
        self.failed_at = failed_at
        self.n_rhs = n_rhs


class SigmaError(RolloutError, ValueError):
    """A non-positive sigma reached the dynamic-variance vector field."""


@dataclass(frozen=True)
class BNodeConfig:
    n_x: int
    n_u: int = 0
    n_p: int = 0
    n_y: int = 0
    variant: str = "const-var"
    lat_x: int = 16
    lat_u: int = 16
    lat_p: int = 16
    hidden: int = 128
    n_layers: int = 4
    activation: str = "elu"
    decoder_layers: int | None = None  # None: n_layers, or 1 (linear) for Koopman variants
    alpha_sigma: float = 0.05
    time_scale: float = 1.0  # seconds per model time unit
    noise_per_rhs: bool = True
    koopman_init: tuple[float, float] = (-1.0, -0.1)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for name in ("n_x", "lat_x", "hidden", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("n_u", "n_p", "n_y", "lat_u", "lat_p"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_u and not self.lat_u or self.n_p and not self.lat_p:
            raise ValueError("a present input group needs a positive latent width")
        if self.alpha_sigma < 0:
            raise ValueError("alpha_sigma must be >= 0")
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")
        lo, hi = self.koopman_init
        if not lo <= hi < 0:
            raise ValueError("koopman_init must be an interval of negative values")

    @property
    def koopman(self) -> bool:
        return self.variant.startswith("koopman")

    @property
    def dynamic_variance(self) -> bool:
        return self.variant.endswith("dyn") or self.variant == "dyn-var"

    @property
    def z_u(self) -> int:
        """Effective latent control width (0 when the system has no controls)."""
        return self.lat_u if self.n_u else 0

    @property
    def z_p(self) -> int:
        return self.lat_p if self.n_p else 0

    @property
    def dec_layers(self) -> int:
        if self.decoder_layers is not None:
            return self.decoder_layers
        return 1 if self.koopman else self.n_layers

    def to_json(self) -> dict:
        d = asdict(self)
        d["koopman_init"] = list(self.koopman_init)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BNodeConfig":
        d = dict(d)
        if "koopman_init" in d:
            d["koopman_init"] = tuple(d["koopman_init"])
        return cls(**d)


@dataclass
class Rollout:
    """Reconstructions and latent trajectories, all in standardized units.

    ``x`` and ``y`` are ``(B, T+1, n)``.  ``mu_x`` is ``(B, T+1, lat_x)``;
    ``sigma_x`` is the same for dynamic variance and ``(B, 1, lat_x)`` for
    constant variance.  In train mode the entries are tape-tracked values.
    """

    x: DiffValue
    y: DiffValue
    mu_x: DiffValue
    sigma_x: DiffValue
    lat_u: GaussianLatent | None
    lat_p: GaussianLatent | None
    n_rhs: int = 0
    n_steps: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.x.shape[1] - 1


class BNodeModel:
    kind = "bnode"

    def __init__(self, cfg: BNodeConfig, seed: int | np.random.Generator = 0, stats=None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.cfg = cfg
        self.stats = stats
        c = cfg
        act = c.activation
        self.enc_x = dc.init_mlp(L.mlp_sizes(c.n_x, 2 * c.lat_x, c.hidden, c.n_layers), act, rng)
        self.enc_u = dc.init_mlp(L.mlp_sizes(c.n_u, 2 * c.lat_u, c.hidden, c.n_layers), act, rng) if c.n_u else None
        self.enc_p = dc.init_mlp(L.mlp_sizes(c.n_p, 2 * c.lat_p, c.hidden, c.n_layers), act, rng) if c.n_p else None
        n_in = c.lat_x + c.z_u + c.z_p
        self.f_mu = self.f_sigma = None
        self.koop: dict[str, DiffValue] = {}
        if c.koopman:
            lo, hi = c.koopman_init
            n = c.lat_x
            self.koop["A_mu_mu"] = DiffValue(np.diag(rng.uniform(lo, hi, n)), requires_grad=True)
            if c.z_u:
                self.koop["B_mu_u"] = DiffValue(rng.normal(0.0, 0.1 / np.sqrt(c.z_u), (n, c.z_u)),
                                                requires_grad=True)
            if c.dynamic_variance:
                self.koop["A_sigma_mu"] = DiffValue(np.zeros((n, n)), requires_grad=True)
                self.koop["A_sigma_sigma"] = DiffValue(np.diag(rng.uniform(lo, hi, n)), requires_grad=True)
                if c.z_u:
                    self.koop["B_sigma_u"] = DiffValue(np.zeros((n, c.z_u)), requires_grad=True)
        else:
            self.f_mu = dc.init_mlp(L.mlp_sizes(n_in, c.lat_x, c.hidden, c.n_layers), act, rng)
            if c.dynamic_variance:
                self.f_sigma = dc.init_mlp(L.mlp_sizes(n_in + c.lat_x, c.lat_x, c.hidden, c.n_layers),
                                           act, rng)
        dec_hidden = c.hidden if c.dec_layers > 1 else 0
        self.dec = dc.init_mlp(L.mlp_sizes(n_in, c.n_x + c.n_y, dec_hidden, c.dec_layers), act, rng)
        if c.koopman and c.dec_layers == 1:
            # small random linear read-out
            for w in self.dec.weights:
                w.data *= 0.1
        self.masks = {"x": np.ones(c.lat_x), "u": np.ones(c.z_u), "p": np.ones(c.z_p)}

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, DiffValue]:
        named: dict[str, DiffValue] = {}
        named.update(self.enc_x.named_parameters("enc_x0"))
        if self.enc_u is not None:
            named.update(self.enc_u.named_parameters("enc_u"))
        if self.enc_p is not None:
            named.update(self.enc_p.named_parameters("enc_p"))
        if self.f_mu is not None:
            named.update(self.f_mu.named_parameters("dyn_mu"))
        if self.f_sigma is not None:
            named.update(self.f_sigma.named_parameters("dyn_sigma"))
        named.update({f"koopman.{k}": v for k, v in self.koop.items()})
        named.update(self.dec.named_parameters("dec"))
        return named

    def parameters(self) -> list[DiffValue]:
        return list(self.named_parameters().values())

    def load_state(self, values: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(values)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in named.items():
            if values[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {values[k].shape} != model shape {p.shape}")
            p.data = np.array(values[k], dtype=np.float64)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "config": self.cfg.to_json(),
                "masks": {k: v.tolist() for k, v in self.masks.items()}}

    def latent_groups(self) -> dict[str, int]:
        return {"x": self.cfg.lat_x, "u": self.cfg.z_u, "p": self.cfg.z_p}

    # -- encoders -------------------------------------------------------------

    def _encode(self, mlp: MlpParams | None, v, n: int, mask: np.ndarray) -> GaussianLatent | None:
        if mlp is None:
            return None
        g = gaussian_head(dc.mlp_forward(mlp, v), n)
        if mask.all():
            return g
        return GaussianLatent(L.apply_mask(g.mu, mask), L.apply_mask(g.sigma, mask, 1.0))

    def encode_parameters(self, p) -> GaussianLatent | None:
        """``None`` when the system has no sampled parameters."""
        return self._encode(self.enc_p, p, self.cfg.lat_p, self.masks["p"])

    def encode_controls(self, u) -> GaussianLatent | None:
        """Per time step and independent across steps; ``u`` is ``(..., n_u)``."""
        return self._encode(self.enc_u, u, self.cfg.lat_u, self.masks["u"])

    def encode_initial_state(self, x0) -> GaussianLatent:
        return self._encode(self.enc_x, x0, self.cfg.lat_x, self.masks["x"])

    # -- latent vector field -----------------------------------------------------

    def _dyn_blocks(self):
        """Per-rollout slices of the dynamics weights (one tape node each)."""
        c = self.cfg
        if c.koopman:
            k = self.koop
            blocks = {"A_mm_T": dc.transpose(k["A_mu_mu"])}
            if "B_mu_u" in k:
                blocks["B_mu_T"] = dc.transpose(k["B_mu_u"])
            if c.dynamic_variance:
                blocks["A_sm_T"] = dc.transpose(k["A_sigma_mu"])
                blocks["A_ss_T"] = dc.transpose(k["A_sigma_sigma"])
                if "B_sigma_u" in k:
                    blocks["B_su_T"] = dc.transpose(k["B_sigma_u"])
            return blocks
        wx, wu, wp = L.row_blocks(self.f_mu, (c.lat_x, c.z_u, c.z_p))
        blocks = {"mu": (wx, wu, wp)}
        if self.f_sigma is not None:
            blocks["sigma"] = L.row_blocks(self.f_sigma, (2 * c.lat_x, c.z_u, c.z_p))
        return blocks

    def _dyn_contexts(self, blocks, uz, pz) -> dict[str, DiffValue | None]:
        """Interval-constant part of the vector field from the control/parameter latents."""
        if self.cfg.koopman:
            ctx = {"mu": None, "sigma": None}
            if uz is not None and "B_mu_T" in blocks:
                ctx["mu"] = dc.matmul(uz, blocks["B_mu_T"])
                if "B_su_T" in blocks:
                    ctx["sigma"] = dc.matmul(uz, blocks["B_su_T"])
            return ctx
        _, wu, wp = blocks["mu"]
        ctx = {"mu": L.context(self.f_mu, [(uz, wu), (pz, wp)])}
        if "sigma" in blocks:
            _, su, sp = blocks["sigma"]
            ctx["sigma"] = L.context(self.f_sigma, [(uz, su), (pz, sp)])
        return ctx

    def _vector_field(self, blocks, state, sigma_const, ctx_mu, ctx_sigma, noise):
        """``noise`` is ``None`` (inference) or a pair of eps arrays."""
        c = self.cfg
        n = c.lat_x
        mask = self.masks["x"]
        if c.dynamic_variance:
            mu, sigma = state[:, :n], state[:, n:]
            if np.any(sigma.data <= 0):
                raise SigmaError("sigma entering dynamic-variance dynamics must be > 0")
        else:
            mu, sigma = state, sigma_const
        if noise is not None:
            eps, eps2 = noise
            mu_s = dc.sample(mu, sigma, eps)
            sigma_s = dc.sample(sigma, sigma, c.alpha_sigma * eps2) if c.dynamic_variance else None
        else:
            mu_s, sigma_s = mu, (sigma if c.dynamic_variance else None)
        mu_s = L.apply_mask(mu_s, mask)
        if sigma_s is not None:
            sigma_s = L.apply_mask(sigma_s, mask, 1.0)

        if c.koopman:
            d_mu = dc.matmul(mu_s, blocks["A_mm_T"])
            if ctx_mu is not None:
                d_mu = d_mu + ctx_mu
            if not c.dynamic_variance:
                return d_mu
            d_sigma = dc.matmul(mu_s, blocks["A_sm_T"]) + dc.matmul(sigma_s, blocks["A_ss_T"])
            if ctx_sigma is not None:
                d_sigma = d_sigma + ctx_sigma
            return dc.concat([d_mu, d_sigma], axis=-1)

        d_mu = L.forward_with_context(self.f_mu, mu_s, blocks["mu"][0], ctx_mu)
        if not c.dynamic_variance:
            return d_mu
        d_sigma = L.forward_with_context(self.f_sigma, dc.concat([mu_s, sigma_s], axis=-1),
                                         blocks["sigma"][0], ctx_sigma)
        return dc.concat([d_mu, d_sigma], axis=-1)

    def latent_dynamics_rhs(self, mu, sigma, uz=None, pz=None, train: bool = False,
                            rng: np.random.Generator | None = None) -> tuple[DiffValue, DiffValue]:
        """Evaluate ``(mu', sigma')`` at a single time for a batch ``(B, lat_x)``."""
        mu, sigma = dc.as_value(mu), dc.as_value(sigma)
        if self.cfg.dynamic_variance and np.any(sigma.data <= 0):
            raise SigmaError("sigma entering dynamic-variance dynamics must be > 0")
        blocks = self._dyn_blocks()
        ctx = self._dyn_contexts(blocks, None if uz is None else dc.as_value(uz),
                                 None if pz is None else dc.as_value(pz))
        noise = self._draw_noise(rng, mu.shape) if train else None
        if self.cfg.dynamic_variance:
            out = self._vector_field(blocks, dc.concat([mu, sigma], -1), None, ctx["mu"], ctx["sigma"], noise)
            n = self.cfg.lat_x
            return out[:, :n], out[:, n:]
        d_mu = self._vector_field(blocks, mu, sigma, ctx["mu"], None, noise)
        return d_mu, DiffValue(np.zeros_like(sigma.data))

    def _draw_noise(self, rng, shape):
        if rng is None:
            raise ValueError("train mode needs an rng")
        eps = rng.standard_normal(shape)
        eps2 = rng.standard_normal(shape) if self.cfg.dynamic_variance else None
        return eps, eps2

    # -- rollout -------------------------------------------------------------

    def rollout(self, x0, u, p, dt: float, solver: SolverConfig = SolverConfig(),
                train: bool = False, rng: np.random.Generator | None = None,
                decoder_noise: bool | None = None) -> Rollout:
        """Encode, integrate ``(mu, sigma)`` and decode on the grid of ``u``.

        ``x0`` is ``(B, n_x)``, ``u`` is ``(B, T+1, n_u)`` (``n_u`` may be 0),
        ``p`` is ``(B, n_p)``; all standardized.  ``decoder_noise`` defaults
        to ``train`` and controls the reparameterized decoder inputs; the
        dynamics noise follows ``train`` alone.
        """
        c = self.cfg
        u = np.asarray(u, dtype=np.float64)
        x0 = np.asarray(x0, dtype=np.float64)
        B, T = x0.shape[0], u.shape[1] - 1
        if T < 1:
            raise ValueError("rollout needs at least one interval")
        if train and rng is None:
            raise ValueError("train mode needs an rng")
        sample_dec = train if decoder_noise is None else decoder_noise
        if sample_dec and rng is None:
            raise ValueError("decoder sampling needs an rng")

        gx0 = self.encode_initial_state(x0)
        gu = self.encode_controls(u)
        gp = self.encode_parameters(np.asarray(p, dtype=np.float64)) if c.n_p else None
        # one draw per u^z_i and for p^z, shared by dynamics and decoder in train mode
        uz_s = gu.sample(rng.standard_normal(gu.mu.shape)) if (gu is not None and (train or sample_dec)) else None
        pz_s = gp.sample(rng.standard_normal(gp.mu.shape)) if (gp is not None and (train or sample_dec)) else None
        uz_mean = gu.mu if gu is not None else None
        pz_mean = gp.mu if gp is not None else None
        uz, pz = (uz_s, pz_s) if sample_dec else (uz_mean, pz_mean)

        blocks = self._dyn_blocks()
        ctx = self._dyn_contexts(blocks, *((uz_s, pz_s) if train else (uz_mean, pz_mean)))
        ctx_mu = L.interval_contexts(ctx["mu"], T) if ctx["mu"] is not None else [None] * T
        ctx_sigma = L.interval_contexts(ctx["sigma"], T) if ctx.get("sigma") is not None else [None] * T

        sigma0 = gx0.sigma
        if c.dynamic_variance:
            s0 = dc.concat([gx0.mu, gx0.sigma], axis=-1)
        else:
            s0 = gx0.mu
        shape = (B, c.lat_x)
        noise_cache: dict[int, tuple] = {}

        def rhs(t, s, i):
            noise = None
            if train:
                if c.noise_per_rhs:
                    noise = self._draw_noise(rng, shape)
                else:
                    noise = noise_cache.get(i) or noise_cache.setdefault(i, self._draw_noise(rng, shape))
            return self._vector_field(blocks, s, sigma0, ctx_mu[i], ctx_sigma[i], noise)

        grid = TimeGrid.from_steps(T, dt / c.time_scale)
        idx = list(range(T))
        if solver.method == "dopri5":
            if train:
                raise ValueError("dopri5 is inference only; train with euler or rk4")
            ctx_mu_np = [None if v is None else v.data for v in ctx_mu]
            ctx_sigma_np = [None if v is None else v.data for v in ctx_sigma]
            sig0 = sigma0.data

            def rhs_np(t, s, i):
                return self._vector_field(
                    blocks, DiffValue(s), DiffValue(sig0),
                    None if ctx_mu_np[i] is None else DiffValue(ctx_mu_np[i]),
                    None if ctx_sigma_np[i] is None else DiffValue(ctx_sigma_np[i]), None).data

            res = integrate(rhs_np, s0.data, grid, solver, idx)
            if not res.ok:
                raise RolloutError(f"latent state became non-finite at t={res.failed_at}",
                                   res.failed_at, res.n_rhs)
            traj = DiffValue(np.swapaxes(res.states, 0, 1))
        else:
            res = integrate(rhs, s0, grid, solver, idx)
            if not res.ok:
                raise RolloutError(f"latent state became non-finite at t={res.failed_at}",
                                   res.failed_at, res.n_rhs)
            traj = dc.stack(res.states, axis=1)

        mask = self.masks["x"]
        if c.dynamic_variance:
            mu_x = traj[..., : c.lat_x]
            sigma_x = traj[..., c.lat_x:]
            if np.any(sigma_x.data <= 0):
                raise SigmaError("dynamic variance produced sigma <= 0", None, res.n_rhs)
        else:
            mu_x = traj
            sigma_x = dc.reshape(sigma0, (B, 1, c.lat_x))
        mu_x = L.apply_mask(mu_x, mask)
        sigma_x = L.apply_mask(sigma_x, mask, 1.0)

        xz = dc.sample(mu_x, sigma_x, rng.standard_normal(mu_x.shape)) if sample_dec else mu_x
        x_hat, y_hat = self.decode(xz, uz, pz)
        return Rollout(x_hat, y_hat, mu_x, sigma_x, gu, gp, res.n_rhs, res.n_steps,
                       {"x0": gx0, "uz": uz, "pz": pz})

    def decode(self, xz, uz=None, pz=None) -> tuple[DiffValue, DiffValue]:
        """Map latent samples to standardized ``(x_hat, y_hat)``."""
        c = self.cfg
        xz = dc.as_value(xz)
        wx, wu, wp = L.row_blocks(self.dec, (c.lat_x, c.z_u, c.z_p))
        uz = None if uz is None else dc.as_value(uz)
        pz = None if pz is None else dc.as_value(pz)
        if pz is not None and xz.ndim == 3:
            pz = dc.reshape(pz, (pz.shape[0], 1, pz.shape[1]))
        ctx = L.context(self.dec, [(uz, wu), (pz, wp)])
        out = L.forward_with_context(self.dec, xz, wx, ctx)
        return out[..., : c.n_x], out[..., c.n_x:]

    def masked(self, masks: dict[str, np.ndarray]) -> "BNodeModel":
        """Copy sharing parameters, with channels where ``mask == 0`` pinned to the prior."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.masks = {k: np.asarray(masks.get(k, v), dtype=np.float64).copy()
                       for k, v in self.masks.items()}
        for k, v in clone.masks.items():
            if v.shape != self.masks[k].shape:
                raise ValueError(f"mask for {k} has shape {v.shape}, expected {self.masks[k].shape}")
        return clone


def _mse(a: DiffValue, b: np.ndarray) -> DiffValue:
    if a.shape[-1] == 0:
        return DiffValue(0.0)
    return dc.mean(dc.square(a - b))


def elbo_loss(model: BNodeModel, x: np.ndarray, y: np.ndarray, ro: Rollout,
              beta: float) -> tuple[DiffValue, dict[str, float]]:
    """``1/2 (MSE_x + MSE_y) + beta * L_KL`` on standardized data.

    ``L_KL = [KL_p + (1/T) sum_k KL_u(k) + (1/T) sum_k KL_x(k)] / (n_p + n_u + n_x)``
    where each KL is summed over channels and averaged over the batch; the
    time sums run over all ``T + 1`` grid points.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    c = model.cfg
    T = ro.T
    rec_x = _mse(ro.x, x)
    rec_y = _mse(ro.y, y)
    rec = 0.5 * (rec_x + rec_y)

    B = ro.x.shape[0]
    zero = DiffValue(0.0)
    kl_p = dc.sum(kl_value(ro.lat_p.mu, ro.lat_p.sigma)) * (1.0 / B) if ro.lat_p is not None else zero
    kl_u = (dc.sum(kl_value(ro.lat_u.mu, ro.lat_u.sigma)) * (1.0 / (B * T))
            if ro.lat_u is not None else zero)
    if ro.sigma_x.shape[1] == 1 and ro.mu_x.shape[1] != 1:
        # constant variance: the sigma part is the same at all T+1 points
        s = ro.sigma_x
        sig_part = dc.sum(dc.square(s) - 1.0 - 2.0 * dc.log(s)) * float(T + 1)
        kl_x = 0.5 * (dc.sum(dc.square(ro.mu_x)) + sig_part) * (1.0 / (B * T))
    else:
        kl_x = dc.sum(kl_value(ro.mu_x, ro.sigma_x)) * (1.0 / (B * T))
    denom = c.n_p + c.n_u + c.n_x
    l_kl = (kl_p + kl_u + kl_x) * (1.0 / denom)
    loss = rec + beta * l_kl
    comps = {"loss": float(loss.data), "rec": float(rec.data), "rec_x": float(rec_x.data),
             "rec_y": float(rec_y.data), "kl": float(l_kl.data), "kl_p": float(kl_p.data),
             "kl_u": float(kl_u.data), "kl_x": float(kl_x.data)}
    return loss, comps
