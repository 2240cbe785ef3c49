"""Periodic grids, continuum-normalized transforms and discrete inner products.

Momentum arrays are stored in ascending order (index j = -M/2 .. M/2-1 along
each axis), position arrays in the natural order x_j = -L/2 + j*dx.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "Grid",
    "make_grid",
    "fft_forward",
    "fft_inverse",
    "inner_product",
    "sobolev_norm",
    "field_norm",
    "gradient",
    "laplacian",
    "momentum_operator",
]


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on [-L/2, L/2)^d with M points per axis."""

    d: int
    L: float
    M: int

    @property
    def dx(self) -> float:
        return self.L / self.M

    @property
    def dk(self) -> float:
        return 2.0 * np.pi / self.L

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.M,) * self.d

    @property
    def size(self) -> int:
        return self.M**self.d

    @property
    def dvx(self) -> float:
        """Volume element dx^d."""
        return self.dx**self.d

    @property
    def dvk(self) -> float:
        """Volume element dk^d."""
        return self.dk**self.d

    @cached_property
    def x1d(self) -> np.ndarray:
        return -self.L / 2 + self.dx * np.arange(self.M)

    @cached_property
    def k1d(self) -> np.ndarray:
        return self.dk * np.arange(-self.M // 2, self.M // 2)

    @cached_property
    def x(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.x1d] * self.d), indexing="ij"))

    @cached_property
    def k(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.k1d] * self.d), indexing="ij"))

    @cached_property
    def k2(self) -> np.ndarray:
        return sum(kc**2 for kc in self.k)

    @cached_property
    def kabs(self) -> np.ndarray:
        return np.sqrt(self.k2)

    @cached_property
    def nyquist(self) -> np.ndarray:
        """Boolean array marking nodes with a component at index -M/2."""
        edge = np.zeros(self.M, dtype=bool)
        edge[0] = True
        masks = np.meshgrid(*([edge] * self.d), indexing="ij")
        return np.logical_or.reduce(masks)

    @cached_property
    def k_max(self) -> float:
        """Largest |k| over non-Nyquist nodes, the grid stand-in for an infinite cutoff."""
        return float(np.sqrt(self.d) * (self.M // 2 - 1) * self.dk)

    @cached_property
    def _sign(self) -> np.ndarray:
        s1 = (-1.0) ** np.arange(-self.M // 2, self.M // 2)
        out = np.ones(self.shape)
        for ax in range(self.d):
            shp = [1] * self.d
            shp[ax] = self.M
            out = out * s1.reshape(shp)
        return out

    def check(self, arr: np.ndarray) -> None:
        if arr.shape[-self.d :] != self.shape:
            raise ValueError(f"array shape {arr.shape} does not match grid {self.shape}")


def make_grid(d: int, L: float, M: int) -> Grid:
    """Validate parameters and build a grid."""
    if d not in (1, 2, 3):
        raise ValueError("d must be 1, 2 or 3")
    if not L > 0:
        raise ValueError("L must be positive")
    if int(M) != M or M < 4:
        raise ValueError("M must be an integer >= 4")
    if M % 2:
        raise ValueError("M must be even")
    return Grid(int(d), float(L), int(M))


def _axes(grid: Grid) -> tuple[int, ...]:
    return tuple(range(-grid.d, 0))


def fft_forward(grid: Grid, u: np.ndarray) -> np.ndarray:
    """(2pi)^{-d/2} dx^d sum_x e^{-ikx} u(x), trailing d axes transformed."""
    grid.check(u)
    ax = _axes(grid)
    raw = np.fft.fftshift(np.fft.fftn(u, axes=ax), axes=ax)
    return raw * grid._sign * (grid.dvx / (2 * np.pi) ** (grid.d / 2))


def fft_inverse(grid: Grid, uh: np.ndarray) -> np.ndarray:
    """(2pi)^{-d/2} dk^d sum_k e^{ikx} uh(k); inverse of fft_forward."""
    grid.check(uh)
    ax = _axes(grid)
    raw = np.fft.ifftn(np.fft.ifftshift(uh * grid._sign, axes=ax), axes=ax)
    return raw * (grid.dvk * grid.size / (2 * np.pi) ** (grid.d / 2))


def inner_product(grid: Grid, f: np.ndarray, g: np.ndarray, space: str = "x") -> complex:
    """Discrete L2 product, antilinear in the first slot."""
    if f.shape != g.shape:
        raise ValueError("representation mismatch")
    grid.check(f)
    if space == "x":
        w = grid.dvx
    elif space == "k":
        w = grid.dvk
    else:
        raise ValueError("space must be 'x' or 'k'")
    return complex(w * np.vdot(f, g))


def sobolev_norm(grid: Grid, u: np.ndarray, s: float) -> float:
    uh = fft_forward(grid, u)
    return float(np.sqrt(grid.dvk * np.sum((1 + grid.k2) ** s * np.abs(uh) ** 2)))


def field_norm(grid: Grid, alpha: np.ndarray, s: float) -> float:
    omega = np.sqrt(grid.k2 + 1)
    return float(np.sqrt(grid.dvk * np.sum(omega ** (2 * s) * np.abs(alpha) ** 2)))


def _kvec_derivative(grid: Grid) -> tuple[np.ndarray, ...]:
    # Nyquist entries dropped so -i d/dx stays hermitian and odd.
    return tuple(np.where(grid.nyquist, 0.0, kc) for kc in grid.k)


def momentum_operator(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Vector field (-i grad) u, shape (d, *grid.shape)."""
    uh = fft_forward(grid, u)
    return np.stack([fft_inverse(grid, kc * uh) for kc in _kvec_derivative(grid)])


def gradient(grid: Grid, u: np.ndarray) -> np.ndarray:
    return 1j * momentum_operator(grid, u)


def laplacian(grid: Grid, u: np.ndarray) -> np.ndarray:
    return fft_inverse(grid, -grid.k2 * fft_forward(grid, u))
