"""Latent diffusion phenotype translation for microscopy images."""

__version__ = "0.1.0"
