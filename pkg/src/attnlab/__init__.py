"""Kernel attention, latent-variable models, transformer bounds and experiments."""

from ._accel import backend
from .linalg import ConjugatePair
from .kernels import KernelSpec

__all__ = ["ConjugatePair", "KernelSpec", "backend"]
__version__ = "0.1.0"
