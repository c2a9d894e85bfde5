"""B-NODE model family, baselines, losses and latent diagnostics."""

from .baselines import (LatentOdeBaseline, LatentOdeConfig, SsNodeConfig, SsNodeModel,
                        latent_ode_loss, latent_ode_trajectory_kl, ssnode_loss)
from .bnode import VARIANTS, BNodeConfig, BNodeModel, Rollout, RolloutError, elbo_loss
from .checkpoint import build_model, load_model, save_model
from .diagnostics import (ACTIVE_THRESHOLD, ActiveDims, Prediction, count_active_dimensions,
                          error_metrics, latent_kl, loss_fn, mask_inactive_channels, predict,
                          sample_trajectories)
from .latent import GaussianLatent, gaussian_head, kl_per_channel, kl_value

__all__ = [
    "GaussianLatent", "gaussian_head", "kl_per_channel", "kl_value",
    "VARIANTS", "BNodeConfig", "BNodeModel", "Rollout", "RolloutError", "elbo_loss",
    "SsNodeConfig", "SsNodeModel", "ssnode_loss",
    "LatentOdeConfig", "LatentOdeBaseline", "latent_ode_loss", "latent_ode_trajectory_kl",
    "ACTIVE_THRESHOLD", "ActiveDims", "Prediction", "predict", "error_metrics", "latent_kl",
    "count_active_dimensions", "mask_inactive_channels", "sample_trajectories", "loss_fn",
    "build_model", "save_model", "load_model",
]
