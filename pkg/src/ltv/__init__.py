"""Learnable total-variation denoising with per-pixel regularization maps."""

__version__ = "0.1.0"
