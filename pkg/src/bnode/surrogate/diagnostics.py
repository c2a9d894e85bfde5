"""Evaluation: inference rollouts, error metrics, latent activity, masking and sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..odeint import SolverConfig
from .baselines import LatentOdeBaseline, SsNodeModel, latent_ode_loss, latent_ode_trajectory_kl, ssnode_loss
from .bnode import BNodeModel, elbo_loss
from .latent import kl_per_channel

__all__ = [
    "ACTIVE_THRESHOLD", "Prediction", "ActiveDims", "loss_fn", "predict", "error_metrics",
    "latent_kl", "count_active_dimensions", "mask_inactive_channels", "sample_trajectories",
]

ACTIVE_THRESHOLD = 0.1


def loss_fn(model):
    """The training objective that belongs to ``model``'s family."""
    if isinstance(model, BNodeModel):
        return elbo_loss
    if isinstance(model, SsNodeModel):
        return ssnode_loss
    if isinstance(model, LatentOdeBaseline):
        return latent_ode_loss
    raise TypeError(f"no loss for {type(model).__name__}")


@dataclass
class Prediction:
    """Standardized inference-mode reconstructions for a block of sequences."""

    x: np.ndarray
    y: np.ndarray
    n_rhs: int
    n_steps: int
    mu_x: np.ndarray | None = None
    sigma_x: np.ndarray | None = None
    kl: dict[str, np.ndarray] = field(default_factory=dict)


def predict(model, arrays: dict[str, np.ndarray], dt: float,
            solver: SolverConfig = SolverConfig(), batch_size: int | None = None) -> Prediction:
    """Inference rollouts over full sequences.

    ``n_rhs`` sums batched right-hand-side calls over the blocks; with the
    default ``batch_size=None`` everything is one block, so it is the count
    for one rollout of the whole split.
    """
    n = arrays["states"].shape[0]
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    bs = batch_size or n
    xs, ys, mus, sigmas = [], [], [], []
    kl_acc: dict[str, list[np.ndarray]] = {}
    n_rhs = n_steps = 0
    for lo in range(0, n, bs):
        sl = slice(lo, lo + bs)
        ro = model.rollout(arrays["states"][sl, 0], arrays["controls"][sl], arrays["parameters"][sl],
                           dt, solver, train=False)
        xs.append(ro.x.data)
        ys.append(ro.y.data)
        n_rhs += ro.n_rhs
        n_steps += ro.n_steps
        if isinstance(model, BNodeModel):
            mu, sig = ro.mu_x.data, np.broadcast_to(ro.sigma_x.data, ro.mu_x.shape)
            mus.append(mu)
            sigmas.append(sig)
            kl_acc.setdefault("x", []).append(kl_per_channel(mu, sig).reshape(-1, mu.shape[-1]))
            if ro.lat_u is not None:
                ku = ro.lat_u.kl()
                kl_acc.setdefault("u", []).append(ku.reshape(-1, ku.shape[-1]))
            if ro.lat_p is not None:
                kl_acc.setdefault("p", []).append(ro.lat_p.kl())
    kl = {k: np.concatenate(v).mean(axis=0) for k, v in kl_acc.items()}
    return Prediction(np.concatenate(xs), np.concatenate(ys), n_rhs, n_steps,
                      np.concatenate(mus) if mus else None,
                      np.concatenate(sigmas) if sigmas else None, kl)


def error_metrics(pred: np.ndarray, truth: np.ndarray, reference_mean: np.ndarray | None = None,
                  reference_std: np.ndarray | None = None) -> dict:
    """Errors on physical (unstandardized) values ``(N, T+1, n)``.

    ``rmse_mean_norm`` divides each variable's RMSE by the magnitude of its
    mean, ``rmse_var_norm`` by its standard deviation; both are then
    averaged over variables.  The references default to the truth's own
    statistics.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if pred.shape[-1] == 0:
        return {"rmse": 0.0, "rmse_mean_norm": 0.0, "rmse_var_norm": 0.0, "max_error": 0.0,
                "per_sample_rmse_mean_norm": np.zeros(pred.shape[0])}
    axes = tuple(range(pred.ndim - 1))
    mean = np.abs(truth.mean(axis=axes) if reference_mean is None else np.asarray(reference_mean))
    std = truth.std(axis=axes) if reference_std is None else np.asarray(reference_std)
    mean = np.where(mean > 0, mean, 1.0)
    std = np.where(std > 0, std, 1.0)
    err = pred - truth
    per_var = np.sqrt((err ** 2).mean(axis=axes))
    per_sample = (np.sqrt((err ** 2).mean(axis=tuple(range(1, pred.ndim - 1)))) / mean).mean(axis=-1)
    return {
        "rmse": float(np.sqrt((err ** 2).mean())),
        "rmse_mean_norm": float((per_var / mean).mean()),
        "rmse_var_norm": float((per_var / std).mean()),
        "max_error": float(np.abs(err).max()),
        "per_sample_rmse_mean_norm": per_sample,
    }


@dataclass
class ActiveDims:
    counts: dict[str, int]
    kl: dict[str, np.ndarray]
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def active(self, group: str, threshold: float = ACTIVE_THRESHOLD) -> np.ndarray:
        return self.kl[group] > threshold


def latent_kl(model, arrays: dict[str, np.ndarray], dt: float,
              solver: SolverConfig = SolverConfig(), n_draws: int = 32, seed: int = 0) -> dict:
    """Mean per-channel KL per latent group over a split (inference mode).

    For the Latent ODE, ``x`` is the trajectory metric estimated from
    ``n_draws`` propagated initial samples and ``x0`` the initial-state KL.
    """
    if isinstance(model, BNodeModel):
        pred = predict(model, arrays, dt, solver)
        return {g: pred.kl.get(g, np.zeros(0)) for g in ("x", "u", "p")}
    if isinstance(model, LatentOdeBaseline):
        traj, init = latent_ode_trajectory_kl(model, arrays["states"][:, 0], arrays["controls"],
                                              arrays["parameters"], dt, solver, n_draws, seed)
        return {"x": traj, "x0": init}
    return {}


def count_active_dimensions(model, arrays: dict[str, np.ndarray], dt: float,
                            solver: SolverConfig = SolverConfig(),
                            threshold: float = ACTIVE_THRESHOLD, **kw) -> ActiveDims:
    kl = latent_kl(model, arrays, dt, solver, **kw)
    counts = {g: int((v > threshold).sum()) for g, v in kl.items()}
    return ActiveDims(counts, kl)


def mask_inactive_channels(model, kl: dict[str, np.ndarray], threshold: float = ACTIVE_THRESHOLD,
                           groups: tuple[str, ...] = ("x",)):
    """Pin channels with mean KL at or below ``threshold`` to the prior.

    Raises if a group would lose every channel.
    """
    masks = {}
    for g in groups:
        if g not in kl or kl[g].size == 0:
            continue
        keep = (np.asarray(kl[g]) > threshold).astype(np.float64)
        if not keep.any():
            raise ValueError(f"threshold {threshold} would mask every {g} channel")
        masks[g] = keep * model.masks[g]
    return model.masked(masks)


def sample_trajectories(model: BNodeModel, x0, u, p, dt: float, n_draws: int, seed: int = 0,
                        solver: SolverConfig = SolverConfig(),
                        quantiles: tuple[float, ...] = (0.05, 0.5, 0.95)) -> dict:
    """Generative draws in data space.

    The latent ODE runs noise-free; each draw samples the decoder inputs
    ``x^z_i``, ``u^z_i`` and ``p^z`` from their propagated Gaussians, so the
    spread comes from the encoded and propagated ``sigma`` only.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for _ in range(n_draws):
        ro = model.rollout(x0, u, p, dt, solver, train=False, rng=rng, decoder_noise=True)
        xs.append(ro.x.data)
        ys.append(ro.y.data)
    X, Y = np.stack(xs), np.stack(ys)
    q = np.asarray(quantiles)
    return {"x": X, "y": Y, "x_mean": X.mean(0), "y_mean": Y.mean(0),
            "x_quantiles": np.quantile(X, q, axis=0), "y_quantiles": np.quantile(Y, q, axis=0),
            "quantiles": q}
