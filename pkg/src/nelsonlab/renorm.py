"""Renormalization constants: continuum radial quadrature and discrete mode sums."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import kernels as kn
from .kernels import KernelSet
from .spectral import inner_product

__all__ = [
    "RenormResult",
    "sphere_area",
    "pair_constant",
    "pair_constant_with_error",
    "e_k_constant",
    "mf_constant",
    "discrete_pair_constant",
    "renorm_constant",
    "log_divergence_fit",
    "QuadratureError",
]


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class RenormResult:
    cutoff: float
    theta: float
    E_pair: float
    E_mf: float
    quad_err: float

    @property
    def E_total(self) -> float:
        return self.E_pair + self.E_mf

    def row(self) -> dict:
        return {"Lambda": self.cutoff, "theta": self.theta, "E_pair": self.E_pair,
                "E_mf": self.E_mf, "E_total": self.E_total, "quad_err": self.quad_err}


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def _radial_integrand(r: float, d: int) -> float:
    w = math.sqrt(r * r + 1.0)
    return r ** (d - 1) / (w * (r * r + w))


def _radial_integral(cutoff: float, d: int, tol: float = 1e-10) -> tuple[float, float]:
    if cutoff < 0:
        raise ValueError("cutoff must be nonnegative")
    if cutoff == 0:
        return 0.0, np.finfo(float).eps
    # log-spaced panels keep every panel well inside quad's subdivision limit
    edges = [0.0] + [e for e in np.geomspace(1.0, max(cutoff, 1.0), 2 + int(math.log10(max(cutoff, 1.0)) * 4))
                     if e < cutoff] + [cutoff]
    edges = sorted(set(edges))
    total, err = 0.0, 0.0
    tol_panel = tol / max(len(edges) - 1, 1)
    for a, b in zip(edges[:-1], edges[1:]):
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, e = integrate.quad(_radial_integrand, a, b, args=(d,), epsabs=tol_panel, epsrel=0, limit=200)
            except integrate.IntegrationWarning as exc:
                raise QuadratureError(f"radial quadrature failed on [{a}, {b}]: {exc}") from exc
        total += val
        err += e
    return total, max(err, np.finfo(float).eps * abs(total))


def pair_constant_with_error(cutoff: float, theta: float, d: int = 3, tol: float = 1e-10) -> tuple[float, float]:
    """(2 theta - theta^2) <G0^L, B0^L> in R^d and its quadrature error estimate."""
    val, err = _radial_integral(cutoff, d, tol / sphere_area(d))
    s = sphere_area(d)
    c = 2 * theta - theta**2
    return c * s * val, max(abs(c) * s * err, np.finfo(float).tiny)


def pair_constant(cutoff: float, theta: float, d: int = 3) -> float:
    return pair_constant_with_error(cutoff, theta, d)[0]


def e_k_constant(K: float, d: int = 3) -> float:
    """integral over |k| <= K of dk / (omega (k^2 + omega))."""
    return pair_constant(K, 1.0, d)


def mf_constant(ks: KernelSet, u: np.ndarray, theta: float) -> float:
    """1/2 <u, V_theta^Lambda * |u|^2 u> on the grid."""
    kn._check_normalized(ks, u)
    rho = np.abs(u) ** 2
    return float(0.5 * inner_product(ks.grid, u, kn.V_theta_convolve(ks, rho, theta) * u).real)


def discrete_pair_constant(ks: KernelSet, theta: float, modes: np.ndarray | None = None) -> float:
    """(2 theta - theta^2) dk^d sum of G0 B0 over the masked nodes (or an explicit mode subset)."""
    w = ks.G * ks.B
    total = np.sum(w) if modes is None else np.sum(w.reshape(-1)[modes])
    return float((2 * theta - theta**2) * ks.grid.dvk * total)


def renorm_constant(cutoff: float, theta: float, ks: KernelSet | None = None, u: np.ndarray | None = None,
                    d: int = 3) -> RenormResult:
    """E^Lambda_theta split into the continuum pair part and the grid mean-field part."""
    pair, err = pair_constant_with_error(cutoff, theta, d)
    emf = 0.0
    if ks is not None and u is not None:
        emf = mf_constant(ks.with_cutoff(cutoff), u, theta)
    return RenormResult(float(cutoff), float(theta), pair, emf, err)


def log_divergence_fit(cutoffs, values) -> tuple[float, float, float]:
    """Least-squares fit values = slope ln(cutoff) + intercept; returns (slope, intercept, rms residual)."""
    x = np.log(np.asarray(cutoffs, dtype=float))
    y = np.asarray(values, dtype=float)
    if x.size < 4:
        raise ValueError("need at least 4 cutoffs")
    if x.max() - x.min() < math.log(100.0) * (1 - 1e-12):
        raise ValueError("cutoffs must span at least two decades")
    X = np.stack([x, np.ones_like(x)], axis=1)
    if np.linalg.matrix_rank(X) < 2:
        raise ValueError("degenerate design matrix")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res**2)))
