"""Residual autoencoder deepfake detector with a split latent space, built on a small numpy autograd."""

__version__ = "0.1.0"
