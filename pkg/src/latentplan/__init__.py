"""Latent-plan autoregressive generation of multi-codebook audio tokens on a synthetic, invertible toy world."""

__version__ = "0.1.0"
