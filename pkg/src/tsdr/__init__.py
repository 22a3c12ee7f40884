"""Doubly robust knowledge tracing with a latent smoothness regularizer."""

__version__ = "0.1.0"
