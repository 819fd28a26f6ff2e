"""Alignment-aware re-identification pipeline at desk scale."""

from .kernels import backend_name as kernel_backend

__version__ = "0.1.0"

__all__ = ["__version__", "kernel_backend"]
