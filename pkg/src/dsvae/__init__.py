"""Disentangled sequential VAE for zero-shot voice conversion."""

__version__ = "0.1.0"
