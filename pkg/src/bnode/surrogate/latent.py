"""Diagonal Gaussian latents and their KL divergence to the standard normal prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..diffcore import DiffValue

__all__ = ["GaussianLatent", "SIGMA_MIN", "SIGMA_MAX", "kl_per_channel", "kl_value", "gaussian_head"]

SIGMA_MIN, SIGMA_MAX = 1e-4, 1e4


@dataclass
class GaussianLatent:
    """``N(mu, diag(sigma^2))``; arrays share a shape whose last axis is the channel."""

    mu: DiffValue
    sigma: DiffValue

    def __post_init__(self) -> None:
        self.mu, self.sigma = dc.as_value(self.mu), dc.as_value(self.sigma)
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ in shape")
        s = self.sigma.data
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise ValueError("sigma must be finite and strictly positive")

    @property
    def n_channels(self) -> int:
        return self.mu.shape[-1]

    def sample(self, eps: np.ndarray | None) -> DiffValue:
        """Reparameterized draw; ``eps=None`` returns the mean."""
        return self.mu if eps is None else dc.sample(self.mu, self.sigma, eps)

    def kl(self) -> np.ndarray:
        return kl_per_channel(self.mu.data, self.sigma.data)


def kl_per_channel(mu, sigma) -> np.ndarray:
    """``-1/2 (1 + log sigma^2 - sigma^2 - mu^2)`` elementwise, as plain numpy."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("KL needs sigma > 0")
    # log1p/expm1 form keeps the value exact to rounding near the prior
    ls = 2.0 * np.log(sigma)
    return 0.5 * (np.expm1(ls) - ls + mu * mu)


def kl_value(mu: DiffValue, sigma: DiffValue) -> DiffValue:
    """Differentiable per-channel KL, same formula as :func:`kl_per_channel`."""
    if np.any(sigma.data <= 0):
        raise ValueError("KL needs sigma > 0")
    return 0.5 * (dc.square(mu) + dc.square(sigma) - 1.0 - 2.0 * dc.log(sigma))


def gaussian_head(out: DiffValue, n: int) -> GaussianLatent:
    """Split ``(..., 2n)`` network output into mean and log-variance, then clamp sigma."""
    if out.shape[-1] != 2 * n:
        raise ValueError(f"expected {2 * n} outputs, got {out.shape[-1]}")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("encoder produced a non-finite output")
    mu = out[..., :n]
    logvar = out[..., n:]
    sigma = dc.clamp(dc.exp(0.5 * logvar), SIGMA_MIN, SIGMA_MAX)
    return GaussianLatent(mu, sigma)
