"""Lanczos Gaussian sampling for diffusion reverse kernels, with path-KL diagnostics."""
__version__ = "0.1.0"
