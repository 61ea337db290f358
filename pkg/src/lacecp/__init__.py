"""Numerics for the lace expansion of the spread-out contact process:
kernels, exact and Monte Carlo two-point functions, the lace recursion,
diagrammatic bounds, inductive bookkeeping and asymptotic fits."""

__version__ = "0.1.0"

from ._validation import CapExceeded, InvariantViolation, ValidationError
from .kernel import KernelD, make_uniform_kernel, kernel_moments, fourier_transform
from .model import ModelParams, SpaceTimeField

__all__ = [
    "CapExceeded", "InvariantViolation", "ValidationError", "KernelD", "make_uniform_kernel",
    "kernel_moments", "fourier_transform", "ModelParams", "SpaceTimeField", "__version__",
]
