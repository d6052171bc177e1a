"""Unsupervised super-resolution of anisotropic volumes via autoencoder latent mixing."""

__version__ = "0.1.0"
