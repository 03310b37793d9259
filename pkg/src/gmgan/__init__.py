"""Gaussian-mixture-prior GANs at desk scale: training, scoring and clustering."""

__version__ = "0.1.0"
