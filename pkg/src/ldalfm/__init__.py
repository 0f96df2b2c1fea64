"""Latent factor rating model trained jointly with an LDA topic model over item reviews."""

__version__ = "0.1.0"
