"""Gaussian smoothing inference, variational bounds, and recurrent
Kalman models for latent linear(-ized) state-space systems."""

from . import autodiff, gauss, lgssm

__all__ = ["autodiff", "gauss", "lgssm"]
__version__ = "0.1.0"
