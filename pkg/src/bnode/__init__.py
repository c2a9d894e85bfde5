"""Balanced Neural ODEs: variational latent-state surrogates for controlled dynamical systems."""

__version__ = "0.1.0"
