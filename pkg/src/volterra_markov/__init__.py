"""Kernels, resolvents and Monte Carlo tools for stochastic Volterra equations."""

__version__ = "0.1.0"

from .errors import InvalidParams, NumericalError, VolterraError
from .kernels import Family, KernelSpec, MatrixKernelSpec
from .resolvents import TimeGrid

__all__ = ["Family", "InvalidParams", "KernelSpec", "MatrixKernelSpec", "NumericalError", "TimeGrid",
           "VolterraError", "__version__"]
