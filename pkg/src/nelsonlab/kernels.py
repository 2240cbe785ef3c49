"""Form factors and effective potentials evaluated pseudo-spectrally.

Every k-space kernel carries the cutoff mask of its KernelSet; the Nyquist
nodes are always excluded so that k -> -k is an exact symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .spectral import Grid, fft_forward, fft_inverse, inner_product, momentum_operator

__all__ = [
    "KernelSet",
    "make_kernels",
    "rho_hat",
    "phi_alpha",
    "phi_tilde_alpha",
    "c_alpha",
    "F_alpha",
    "V_theta_hat",
    "V_theta_convolve",
    "f_u",
    "g_u_alpha",
    "mu",
    "tau",
    "apply_A",
    "apply_h_theta",
]


@dataclass(frozen=True)
class KernelSet:
    grid: Grid
    cutoff: float
    coupling: float = 1.0  # multiplies G; 0 gives the decoupled control model

    @cached_property
    def mask(self) -> np.ndarray:
        g = self.grid
        return (g.kabs <= self.cutoff * (1 + 1e-12)) & ~g.nyquist

    @cached_property
    def omega(self) -> np.ndarray:
        return np.sqrt(self.grid.k2 + 1.0)

    @cached_property
    def G0(self) -> np.ndarray:
        return self.coupling * self.omega**-0.5

    @cached_property
    def B0(self) -> np.ndarray:
        return self.G0 / (self.grid.k2 + self.omega)

    @cached_property
    def kB0(self) -> np.ndarray:
        """Vector kernel k B0(k), shape (d, *grid.shape)."""
        return np.stack([kc * self.B0 for kc in self.grid.k])

    # masked versions, the ones entering every physics formula
    @cached_property
    def G(self) -> np.ndarray:
        return np.where(self.mask, self.G0, 0.0)

    @cached_property
    def B(self) -> np.ndarray:
        return np.where(self.mask, self.B0, 0.0)

    @cached_property
    def kB(self) -> np.ndarray:
        return np.where(self.mask, self.kB0, 0.0)

    @property
    def is_full(self) -> bool:
        return self.cutoff >= self.grid.k_max

    def with_cutoff(self, cutoff: float | None) -> "KernelSet":
        return make_kernels(self.grid, cutoff, self.coupling)


def make_kernels(grid: Grid, cutoff: float | None = None, coupling: float = 1.0) -> KernelSet:
    """Kernel arrays for cutoff Lambda; None or inf means the whole grid."""
    if cutoff is None or not np.isfinite(cutoff) or cutoff >= grid.k_max:
        cutoff = grid.k_max
    if cutoff < 0:
        raise ValueError("cutoff must be nonnegative")
    return KernelSet(grid, float(cutoff), float(coupling))


def _pref(grid: Grid) -> float:
    return (2 * np.pi) ** (grid.d / 2)


def rho_hat(ks: KernelSet, u: np.ndarray) -> np.ndarray:
    """int dx e^{-ikx} |u(x)|^2, the source shared by the alpha equation and the dressing flow."""
    return _pref(ks.grid) * fft_forward(ks.grid, np.abs(u) ** 2)


def phi_alpha(ks: KernelSet, alpha: np.ndarray) -> np.ndarray:
    """2 Re <G_x, alpha>."""
    return 2 * np.real(_pref(ks.grid) * fft_inverse(ks.grid, ks.G * alpha))


def phi_tilde_alpha(ks: KernelSet, alpha: np.ndarray) -> np.ndarray:
    """2 Re <i B_x, alpha>; the conjugated first slot turns i into -i."""
    return 2 * np.real(_pref(ks.grid) * fft_inverse(ks.grid, -1j * ks.B * alpha))


def c_alpha(ks: KernelSet, alpha: np.ndarray) -> np.ndarray:
    """<k B_x, alpha> componentwise, shape (d, *grid.shape)."""
    return np.stack([_pref(ks.grid) * fft_inverse(ks.grid, kb * alpha) for kb in ks.kB])


def F_alpha(ks: KernelSet, alpha: np.ndarray) -> np.ndarray:
    return 2 * np.real(c_alpha(ks, alpha))


def V_theta_hat(ks: KernelSet, theta: float) -> np.ndarray:
    """Unitary Fourier transform of V_theta^Lambda."""
    raw = -4 * theta * ks.G0 * ks.B0 + 2 * theta**2 * ks.omega * ks.B0**2
    return _pref(ks.grid) * np.where(ks.mask, raw, 0.0)


def V_theta_convolve(ks: KernelSet, rho: np.ndarray, theta: float) -> np.ndarray:
    """(V_theta^Lambda * rho)(x)."""
    g = ks.grid
    out = _pref(g) * fft_inverse(g, V_theta_hat(ks, theta) * fft_forward(g, rho))
    return np.real(out)


def f_u(ks: KernelSet, u: np.ndarray) -> np.ndarray:
    """2 <u, k B_(.)(k) (-i grad) u>, contracted over the vector index."""
    g = ks.grid
    pu = momentum_operator(g, u)
    out = np.zeros(g.shape, dtype=complex)
    for kb, pj in zip(ks.kB, pu):
        out += 2 * kb * _pref(g) * fft_forward(g, np.conj(u) * pj)
    return out


def g_u_alpha(ks: KernelSet, u: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """2 <u, k B_(.)(k) F_alpha u>."""
    g = ks.grid
    F = F_alpha(ks, alpha)
    rho = np.abs(u) ** 2
    out = np.zeros(g.shape, dtype=complex)
    for kb, Fj in zip(ks.kB, F):
        out += 2 * kb * _pref(g) * fft_forward(g, Fj * rho)
    return out


def _check_normalized(ks: KernelSet, u: np.ndarray) -> None:
    n2 = inner_product(ks.grid, u, u).real
    if abs(n2 - 1) > 1e-8 * 2:
        raise ValueError(f"u must be normalized, got |u|^2 = {n2:.12g}")


def mu(ks: KernelSet, u: np.ndarray, alpha: np.ndarray, theta: float, check: bool = True) -> float:
    if check:
        _check_normalized(ks, u)
    g = ks.grid
    rho = np.abs(u) ** 2
    val = (1 - theta) / 2 * g.dvx * np.sum(phi_alpha(ks, alpha) * rho)
    val += 0.5 * g.dvx * np.sum(V_theta_convolve(ks, rho, theta) * rho)
    if theta:
        src = f_u(ks, u) + theta * g_u_alpha(ks, u, alpha)
        val += theta * inner_product(g, alpha, src, "k").real
    return float(val)


def tau(ks: KernelSet, u: np.ndarray, alpha: np.ndarray, check: bool = True) -> np.ndarray:
    if check:
        _check_normalized(ks, u)
    pt = phi_tilde_alpha(ks, alpha)
    return pt - 0.5 * ks.grid.dvx * np.sum(pt * np.abs(u) ** 2)


def apply_A(ks: KernelSet, alpha: np.ndarray, psi: np.ndarray, c: np.ndarray | None = None) -> np.ndarray:
    """A_alpha psi = 2(-i grad)(c psi) + 2 conj(c).(-i grad psi)."""
    g = ks.grid
    if c is None:
        c = c_alpha(ks, alpha)
    ppsi = momentum_operator(g, psi)
    out = np.zeros(g.shape, dtype=complex)
    for j in range(g.d):
        out += 2 * momentum_operator(g, c[j] * psi)[j] + 2 * np.conj(c[j]) * ppsi[j]
    return out


@dataclass(frozen=True)
class HTheta:
    """Pieces of h_{u,alpha,theta} frozen at a reference pair (u, alpha)."""

    ks: KernelSet
    theta: float
    potential: np.ndarray  # local part: (1-theta) phi + theta^2 F^2 + V*|u|^2 - mu
    c: np.ndarray

    def __call__(self, psi: np.ndarray) -> np.ndarray:
        g = self.ks.grid
        out = fft_inverse(g, g.k2 * fft_forward(g, psi)) + self.potential * psi
        if self.theta:
            out += self.theta * apply_A(self.ks, None, psi, c=self.c)
        return out


def h_theta(ks: KernelSet, u: np.ndarray, alpha: np.ndarray, theta: float, check: bool = True) -> HTheta:
    # RK stage states leave the unit sphere at the truncation-error level, so integrators pass check=False.
    phi = phi_alpha(ks, alpha)
    c = c_alpha(ks, alpha)
    F = 2 * np.real(c)
    pot = (1 - theta) * phi + theta**2 * np.sum(F**2, axis=0)
    pot = pot + V_theta_convolve(ks, np.abs(u) ** 2, theta) - mu(ks, u, alpha, theta, check)
    return HTheta(ks, float(theta), pot, c)


def apply_h_theta(ks: KernelSet, u: np.ndarray, alpha: np.ndarray, theta: float, psi: np.ndarray) -> np.ndarray:
    """h_{u,alpha,theta} psi."""
    return h_theta(ks, u, alpha, theta)(psi)
