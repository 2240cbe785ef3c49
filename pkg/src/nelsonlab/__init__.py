"""Mean-field, Bogoliubov and exact many-body numerics for the renormalized Nelson model."""

__version__ = "0.1.0"

from .spectral import Grid, make_grid  # noqa: E402
from .kernels import KernelSet, make_kernels  # noqa: E402
from .meanfield import MeanFieldState, FlowSpec, integrate, evolve, energy  # noqa: E402

__all__ = ["__version__", "Grid", "make_grid", "KernelSet", "make_kernels", "MeanFieldState", "FlowSpec",
           "integrate", "evolve", "energy"]
