"""Mean-field flows: SKG, the interpolating theta-flow, and the dressing flow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as kn
from .kernels import KernelSet
from .spectral import Grid, fft_forward, inner_product, sobolev_norm, field_norm

__all__ = [
    "MeanFieldState",
    "FlowSpec",
    "Trajectory",
    "theta_rhs",
    "rk4_step",
    "integrate",
    "evolve",
    "energy",
    "dressing_flow_closed",
    "dressing_flow_ode",
    "commuting_diagram_defect",
    "gaussian_state",
    "random_state",
    "state_distance",
]


@dataclass
class MeanFieldState:
    u: np.ndarray
    alpha: np.ndarray
    t: float = 0.0

    def copy(self) -> "MeanFieldState":
        return MeanFieldState(self.u.copy(), self.alpha.copy(), self.t)


@dataclass(frozen=True)
class FlowSpec:
    theta: float = 1.0
    cutoff: float | None = None
    dt: float = 1e-3
    t_final: float = 1.0
    stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must lie in [0, 1]")


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    norm_u: list = field(default_factory=list)
    energy_theta: list = field(default_factory=list)
    H3_norm_u: list = field(default_factory=list)
    h52_norm_alpha: list = field(default_factory=list)

    @property
    def final(self) -> MeanFieldState:
        return self.states[-1]

    def rows(self):
        return zip(self.times, self.norm_u, self.energy_theta, self.H3_norm_u, self.h52_norm_alpha)


def gaussian_state(grid: Grid, width: float = 1.0, center: float = 0.0, momentum: float = 0.0,
                   alpha_amp: float = 0.0) -> MeanFieldState:
    """Normalized Gaussian u; alpha is zero or a smooth real bump of the given amplitude."""
    r2 = sum((xc - center) ** 2 for xc in grid.x)
    u = np.exp(-r2 / (2 * width**2)) * np.exp(1j * momentum * grid.x[0])
    u = u / np.sqrt(inner_product(grid, u, u).real)
    alpha = np.where(grid.nyquist, 0.0, alpha_amp * np.exp(-grid.k2 / 2)).astype(complex)
    return MeanFieldState(u.astype(complex), alpha)


def random_state(grid: Grid, rng: np.random.Generator, kcut: float = 3.0, alpha_scale: float = 0.3) -> MeanFieldState:
    """Smooth random pair: complex Gaussian coefficients under a Gaussian envelope."""
    env = np.exp(-grid.k2 / (2 * (kcut / 2) ** 2))
    env = np.where(grid.nyquist, 0.0, env)
    coef = (rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)) * env
    from .spectral import fft_inverse
    u = fft_inverse(grid, coef)
    xenv = np.exp(-sum(xc**2 for xc in grid.x) / (2 * (grid.L / 8) ** 2))
    u = u * xenv
    u = u / np.sqrt(inner_product(grid, u, u).real)
    a = (rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)) * env * alpha_scale
    return MeanFieldState(u, a)


def theta_rhs(ks: KernelSet, u: np.ndarray, alpha: np.ndarray, theta: float):
    """(du/dt, dalpha/dt) of the theta-flow."""
    if not 0 <= theta <= 1:
        raise ValueError("theta must lie in [0, 1]")
    h = kn.h_theta(ks, u, alpha, theta, check=False)
    du = -1j * h(u)
    src = (1 - theta) * ks.G * kn.rho_hat(ks, u)
    if theta:
        src = src + theta * kn.f_u(ks, u) + theta**2 * kn.g_u_alpha(ks, u, alpha)
    dalpha = -1j * (ks.omega * alpha + src)
    dalpha = np.where(ks.grid.nyquist, 0.0, dalpha)
    return du, dalpha


def rk4_step(rhs, y, h):
    """One classical RK4 step for a tuple-valued autonomous right-hand side."""
    k1 = rhs(*y)
    y2 = tuple(a + h / 2 * b for a, b in zip(y, k1))
    k2 = rhs(*y2)
    y3 = tuple(a + h / 2 * b for a, b in zip(y, k2))
    k3 = rhs(*y3)
    y4 = tuple(a + h * b for a, b in zip(y, k3))
    k4 = rhs(*y4)
    return tuple(a + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))


def _nsteps(span: float, dt: float) -> int:
    n = int(round(abs(span) / dt))
    return max(n, 1) if span else 0


def _guard(state: MeanFieldState) -> None:
    if not (np.all(np.isfinite(state.u)) and np.all(np.isfinite(state.alpha))):
        raise FloatingPointError(
            f"non-finite state at t={state.t}: max|u|={np.max(np.abs(state.u))}, "
            f"max|alpha|={np.max(np.abs(state.alpha))}")


def evolve(ks: KernelSet, state: MeanFieldState, theta: float, t: float, dt: float) -> MeanFieldState:
    """The theta-flow over a time span t (may be negative) with fixed steps close to dt."""
    n = _nsteps(t, dt)
    if n == 0:
        return state.copy()
    h = t / n
    rhs = lambda u, a: theta_rhs(ks, u, a, theta)
    y = (state.u, state.alpha)
    for _ in range(n):
        y = rk4_step(rhs, y, h)
    out = MeanFieldState(y[0], y[1], state.t + t)
    _guard(out)
    return out


def energy(ks: KernelSet, state: MeanFieldState, theta: float) -> float:
    """E_theta(u, alpha)."""
    g = ks.grid
    u, alpha = state.u, state.alpha
    rho = np.abs(u) ** 2
    uh = fft_forward(g, u)
    val = g.dvk * np.sum(g.k2 * np.abs(uh) ** 2)
    val += (1 - theta) * g.dvx * np.sum(kn.phi_alpha(ks, alpha) * rho)
    if theta:
        c = kn.c_alpha(ks, alpha)
        val += theta * inner_product(g, u, kn.apply_A(ks, alpha, u, c=c)).real
        val += theta**2 * g.dvx * np.sum(np.sum((2 * c.real) ** 2, axis=0) * rho)
    val += 0.5 * g.dvx * np.sum(kn.V_theta_convolve(ks, rho, theta) * rho)
    val += g.dvk * np.sum(ks.omega * np.abs(alpha) ** 2)
    return float(val)


def integrate(ks: KernelSet, state: MeanFieldState, spec: FlowSpec) -> Trajectory:
    """Fixed-step RK4 along the theta-flow with diagnostics every `stride` steps."""
    if spec.cutoff is not None and abs(spec.cutoff - ks.cutoff) > 1e-12 and not (
            spec.cutoff >= ks.grid.k_max and ks.is_full):
        ks = ks.with_cutoff(spec.cutoff)
    g = ks.grid
    n = _nsteps(spec.t_final, spec.dt)
    h = spec.t_final / n if n else spec.dt
    traj = Trajectory()
    rhs = lambda u, a: theta_rhs(ks, u, a, spec.theta)

    def record(s):
        traj.times.append(s.t)
        traj.states.append(s)
        traj.norm_u.append(np.sqrt(inner_product(g, s.u, s.u).real))
        traj.energy_theta.append(energy(ks, s, spec.theta))
        traj.H3_norm_u.append(sobolev_norm(g, s.u, 3))
        traj.h52_norm_alpha.append(field_norm(g, s.alpha, 2.5))

    cur = state.copy()
    record(cur)
    y = (cur.u, cur.alpha)
    for i in range(1, n + 1):
        y = rk4_step(rhs, y, h)
        if i % spec.stride == 0 or i == n:
            cur = MeanFieldState(y[0], y[1], state.t + i * h)
            _guard(cur)
            record(cur)
    return traj


def dressing_flow_closed(ks: KernelSet, state: MeanFieldState, theta: float) -> MeanFieldState:
    """(e^{-i theta tau} u, alpha + theta B0 rho_hat)."""
    tau = kn.tau(ks, state.u, state.alpha)
    u = np.exp(-1j * theta * tau) * state.u
    alpha = state.alpha + theta * ks.B * kn.rho_hat(ks, state.u)
    return MeanFieldState(u, alpha, state.t)


def dressing_rhs(ks: KernelSet, u: np.ndarray, alpha: np.ndarray):
    return -1j * kn.tau(ks, u, alpha, check=False) * u, ks.B * kn.rho_hat(ks, u)


def dressing_flow_ode(ks: KernelSet, state: MeanFieldState, theta: float, dtheta: float = 1e-3) -> MeanFieldState:
    """RK4 integration of the dressing equations from 0 to theta."""
    n = _nsteps(theta, dtheta)
    if n == 0:
        return state.copy()
    h = theta / n
    y = (state.u, state.alpha)
    rhs = lambda u, a: dressing_rhs(ks, u, a)
    for _ in range(n):
        y = rk4_step(rhs, y, h)
    out = MeanFieldState(y[0], y[1], state.t)
    _guard(out)
    return out


def state_distance(grid: Grid, a: MeanFieldState, b: MeanFieldState) -> float:
    """Norm of the difference in L2 + L2."""
    du = a.u - b.u
    da = a.alpha - b.alpha
    return float(np.sqrt(inner_product(grid, du, du).real + inner_product(grid, da, da, "k").real))


def commuting_diagram_defect(ks: KernelSet, state: MeanFieldState, t: float, dt: float,
                             theta: float = 1.0) -> float:
    """|| s_theta[t](D[theta] x) - D[theta](s_0[t] x) ||."""
    left = evolve(ks, dressing_flow_closed(ks, state, theta), theta, t, dt)
    right = dressing_flow_closed(ks, evolve(ks, state, 0.0, t, dt), theta)
    return state_distance(ks.grid, left, right)
