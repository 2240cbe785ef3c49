"""Quadratic generators on the doubled mode space and Bogoliubov matrix flows.

Convention: a generator (A, B) stands for c^* A c + 1/2 (c^* B c^*T + h.c.) and a
Bogoliubov matrix (U, V) for c^*(f) -> c^*(U f) + c(V conj f).  With i d/dt of the
unitary equal to the generator times the unitary, the block matrix
V = [[U, V], [conj V, conj U]] obeys i dV/dt = [[A, -B], [conj B, -conj A]] V.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import expm

from . import kernels as kn
from .kernels import KernelSet, make_kernels
from .meanfield import MeanFieldState, dressing_flow_closed, theta_rhs
from .spectral import Grid, laplacian, momentum_operator

__all__ = [
    "ModeSpace",
    "QuadraticGenerator",
    "BogMatrix",
    "assemble_H_bog",
    "assemble_HD_direct",
    "assemble_D_bog",
    "block_generator",
    "bog_rhs",
    "evolve_constant",
    "expm_generator",
    "evolve_bog",
    "evolve_dressing_bog",
    "symplectic_defect",
    "pairing_orthogonality",
    "dressing_identity_defect",
    "dressing_identity_report",
    "resolved_columns",
    "column_symplectic_defect",
    "BogoliubovPropagationError",
]


class BogoliubovPropagationError(RuntimeError):
    pass


def _op_matrix(grid: Grid, op) -> np.ndarray:
    """Matrix of a linear grid operator in the orthonormal site basis."""
    n = grid.size
    eye = np.eye(n, dtype=complex).reshape((n,) + grid.shape)
    cols = [np.asarray(op(e)).reshape(-1) for e in eye]
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class ModeSpace:
    """Particle sites followed by the field modes with |k| <= field_cutoff."""

    grid: Grid
    field_cutoff: float

    @cached_property
    def field_mask(self) -> np.ndarray:
        g = self.grid
        return (g.kabs <= self.field_cutoff * (1 + 1e-12)) & ~g.nyquist

    @cached_property
    def field_index(self) -> np.ndarray:
        return np.flatnonzero(self.field_mask.reshape(-1))

    @property
    def n_b(self) -> int:
        return self.grid.size

    @property
    def n_a(self) -> int:
        return int(self.field_index.size)

    @property
    def n(self) -> int:
        return self.n_b + self.n_a

    @cached_property
    def kf(self) -> np.ndarray:
        """Field-mode momenta, shape (d, n_a)."""
        return np.stack([kc.reshape(-1)[self.field_index] for kc in self.grid.k])

    @cached_property
    def neg(self) -> np.ndarray:
        """Permutation sending field mode k to -k."""
        kf = np.round(self.kf / self.grid.dk).astype(int)
        lookup = {tuple(col): i for i, col in enumerate(kf.T)}
        return np.array([lookup[tuple(-col)] for col in kf.T])

    @cached_property
    def xs(self) -> np.ndarray:
        return np.stack([xc.reshape(-1) for xc in self.grid.x])

    @cached_property
    def plane(self) -> np.ndarray:
        """e^{-ik.x}, shape (n_b, n_a)."""
        return np.exp(-1j * (self.xs.T @ self.kf))

    @cached_property
    def lap(self) -> np.ndarray:
        """Matrix of -Delta in the site basis."""
        return _op_matrix(self.grid, lambda e: -laplacian(self.grid, e))

    @cached_property
    def mom(self) -> np.ndarray:
        """Matrices of -i d/dx_j, shape (d, n_b, n_b)."""
        g = self.grid
        return np.stack([_op_matrix(g, lambda e, j=j: momentum_operator(g, e)[j]) for j in range(g.d)])

    def field_values(self, arr: np.ndarray) -> np.ndarray:
        return arr.reshape(-1)[self.field_index]

    def free_part(self, omega: np.ndarray) -> np.ndarray:
        """Diagonal-in-momentum free generator -Delta (+) omega."""
        out = np.zeros((self.n, self.n), dtype=complex)
        out[: self.n_b, : self.n_b] = self.lap
        out[self.n_b:, self.n_b:] = np.diag(self.field_values(omega))
        return out

    def low_particle_projector(self, kcut: float) -> np.ndarray:
        """Projector onto particle momenta |k| <= kcut plus every field mode."""
        g = self.grid
        sel = np.fft.ifftshift(g.kabs <= kcut * (1 + 1e-12)).reshape(-1).astype(float)
        F = _op_matrix(g, lambda e: np.fft.fftn(e, norm="ortho"))
        Pb = F.conj().T @ np.diag(sel) @ F
        P = np.zeros((self.n, self.n), dtype=complex)
        P[: self.n_b, : self.n_b] = Pb
        P[self.n_b:, self.n_b:] = np.eye(self.n_a)
        return P


def make_mode_space(grid: Grid, field_cutoff: float | None = None) -> ModeSpace:
    if field_cutoff is None or not np.isfinite(field_cutoff) or field_cutoff >= grid.k_max:
        field_cutoff = grid.k_max
    return ModeSpace(grid, float(field_cutoff))


@dataclass
class QuadraticGenerator:
    A: np.ndarray
    B: np.ndarray
    c0: float = 0.0
    label: str = ""

    def check(self, tol: float = 1e-12) -> None:
        na = max(np.linalg.norm(self.A), 1.0)
        nb = max(np.linalg.norm(self.B), 1.0)
        ha = np.linalg.norm(self.A - self.A.conj().T)
        sb = np.linalg.norm(self.B - self.B.T)
        if ha > tol * na:
            raise ValueError(f"{self.label}: A not hermitian ({ha:.3e})")
        if sb > tol * nb:
            raise ValueError(f"{self.label}: B not symmetric ({sb:.3e})")


@dataclass
class BogMatrix:
    U: np.ndarray
    V: np.ndarray
    phase: float = 0.0

    @classmethod
    def identity(cls, n: int) -> "BogMatrix":
        return cls(np.eye(n, dtype=complex), np.zeros((n, n), dtype=complex))

    def block(self) -> np.ndarray:
        return np.block([[self.U, self.V], [self.V.conj(), self.U.conj()]])

    @classmethod
    def from_block(cls, W: np.ndarray) -> "BogMatrix":
        n = W.shape[0] // 2
        return cls(W[:n, :n].copy(), W[:n, n:].copy())

    def inverse(self) -> "BogMatrix":
        """Symplectic inverse [[U^*, -V^T], [-V^*, U^T]] (exact only on symplectic input)."""
        return BogMatrix(self.U.conj().T, -self.V.T)

    def __matmul__(self, other: "BogMatrix") -> "BogMatrix":
        return BogMatrix(self.U @ other.U + self.V @ other.V.conj(),
                         self.U @ other.V + self.V @ other.U.conj())


def symplectic_defect(W: BogMatrix) -> float:
    n = W.U.shape[0]
    a = np.linalg.norm(W.U @ W.U.conj().T - W.V @ W.V.conj().T - np.eye(n), 2)
    s = W.U @ W.V.T
    b = np.linalg.norm(s - s.T, 2)
    return float(max(a, b))


def block_generator(gen: QuadraticGenerator) -> np.ndarray:
    return np.block([[gen.A, -gen.B], [gen.B.conj(), -gen.A.conj()]])


def bog_rhs(gen: QuadraticGenerator, W: BogMatrix) -> BogMatrix:
    """d/dt of (U, V) under i dV/dt = (block generator) V."""
    if gen.A.shape != W.U.shape:
        raise ValueError(f"dimension mismatch: generator {gen.A.shape}, matrix {W.U.shape}")
    return BogMatrix(-1j * (gen.A @ W.U - gen.B @ W.V.conj()),
                     -1j * (gen.A @ W.V - gen.B @ W.U.conj()))


def evolve_constant(gen: QuadraticGenerator, t: float, dt: float = 1e-3) -> BogMatrix:
    """RK4 integration of bog_rhs for a time-independent generator, from the identity."""
    n = max(int(round(abs(t) / dt)), 1) if t else 0
    W = BogMatrix.identity(gen.A.shape[0])
    if n == 0:
        return W
    h = t / n
    for _ in range(n):
        k1 = bog_rhs(gen, W)
        k2 = bog_rhs(gen, BogMatrix(W.U + h / 2 * k1.U, W.V + h / 2 * k1.V))
        k3 = bog_rhs(gen, BogMatrix(W.U + h / 2 * k2.U, W.V + h / 2 * k2.V))
        k4 = bog_rhs(gen, BogMatrix(W.U + h * k3.U, W.V + h * k3.V))
        W = BogMatrix(W.U + h / 6 * (k1.U + 2 * k2.U + 2 * k3.U + k4.U),
                      W.V + h / 6 * (k1.V + 2 * k2.V + 2 * k3.V + k4.V))
    return W


def expm_generator(gen: QuadraticGenerator, t: float) -> BogMatrix:
    """exp(-i t block) as a BogMatrix; the closed form of evolve_constant."""
    return BogMatrix.from_block(expm(-1j * t * block_generator(gen)))


def _projector(ms: ModeSpace, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # normalizing keeps q_u an exact projector at RK stage points off the unit sphere
    uh = u.reshape(-1) * np.sqrt(ms.grid.dvx)
    uh = uh / np.linalg.norm(uh)
    return np.eye(ms.n_b) - np.outer(uh, uh.conj()), uh


def _v_matrix(ms: ModeSpace, ks: KernelSet, theta: float) -> np.ndarray:
    """dx V_theta^Lambda(x_i - x_j), the matrix of rho -> V * rho."""
    return _op_matrix(ms.grid, lambda e: kn.V_theta_convolve(ks, e.real, theta)).real


def _qleft(uh: np.ndarray, X: np.ndarray) -> np.ndarray:
    """q_u X as a rank-one update."""
    return X - np.outer(uh, uh.conj() @ X)


def _qright(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """X (1 - w w^*)."""
    return X - np.outer(X @ w, w.conj())


def _pair_blocks(ms: ModeSpace, u: np.ndarray, Vm: np.ndarray):
    _, uh = _projector(ms, u)
    uf = u.reshape(-1)
    K1 = _qright(_qleft(uh, uf[:, None] * Vm * uf.conj()[None, :]), uh)
    K2 = _qright(_qleft(uh, uf[:, None] * Vm * uf[None, :]), uh.conj())
    return K1, K2


def _field_blocks(ms: ModeSpace, u: np.ndarray, Bl: np.ndarray, theta2: float):
    g = ms.grid
    rho = np.abs(u.reshape(-1)) ** 2 * g.dvx
    E = ms.plane
    Mkl = (ms.kf.T @ ms.kf) * np.outer(Bl, Bl) * (E.T @ (rho[:, None] * E))
    Mkml = Mkl[:, ms.neg]
    return -2 * theta2 * g.dvk * Mkml, 2 * theta2 * g.dvk * Mkl


def _assemble(ms, hpp, K1, K2, Amix, Bmix, Aff, Bff, label):
    nb = ms.n_b
    A = np.zeros((ms.n, ms.n), dtype=complex)
    B = np.zeros((ms.n, ms.n), dtype=complex)
    A[:nb, :nb] = hpp + K1
    A[:nb, nb:] = Amix
    A[nb:, :nb] = Amix.conj().T
    A[nb:, nb:] = Aff
    B[:nb, :nb] = K2
    B[:nb, nb:] = Bmix
    B[nb:, :nb] = Bmix.T
    B[nb:, nb:] = Bff
    A = 0.5 * (A + A.conj().T)
    B = 0.5 * (B + B.T)
    return QuadraticGenerator(A, B, 0.0, label)


@dataclass
class _HCache:
    ms: ModeSpace
    ks_mf: KernelSet
    ks_L: KernelSet
    theta: float
    Vm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.Vm = _v_matrix(self.ms, self.ks_L, self.theta)


def assemble_H_bog(ms: ModeSpace, ks_mf: KernelSet, ks_L: KernelSet, state: MeanFieldState,
                   theta: float, cache: _HCache | None = None, check: bool = True) -> QuadraticGenerator:
    """H^Lambda_{u,alpha,theta}: mean-field pieces from ks_mf, cutoff kernels from ks_L."""
    if cache is None:
        cache = _HCache(ms, ks_mf, ks_L, theta)
    g = ms.grid
    u, alpha = state.u, state.alpha
    uf = u.reshape(-1)
    h = kn.h_theta(ks_mf, u, alpha, theta, check=check)
    c = h.c.reshape(g.d, -1)
    hpp = ms.lap + np.diag(h.potential.reshape(-1))
    for j in range(g.d):
        hpp = hpp + theta * 2 * (ms.mom[j] * c[j][None, :] + c[j].conj()[:, None] * ms.mom[j])
    K1, K2 = _pair_blocks(ms, u, cache.Vm)
    _, uh = _projector(ms, u)
    Gl = ms.field_values(ks_L.G)
    Bl = ms.field_values(ks_L.B)
    F = 2 * c.real
    E = ms.plane
    s = np.zeros((g.d, ms.n_b), dtype=complex)
    for j in range(g.d):
        s[j] = theta * (ms.mom[j] @ uf) + theta**2 * F[j] * uf
    w = (1 - theta) * uf[:, None] * Gl[None, :] + 2 * Bl[None, :] * (s.T @ ms.kf)
    scale = np.sqrt(g.dvx * g.dvk)
    Bmix = scale * _qleft(uh, E * w)
    Eu = E.conj() * uf[:, None]
    m = (1 - theta) * Gl[None, :] * Eu
    for j in range(g.d):
        m = m + 2 * theta * Bl[None, :] * ms.kf[j][None, :] * (ms.mom[j] @ Eu)
        m = m + 2 * theta**2 * Bl[None, :] * ms.kf[j][None, :] * F[j][:, None] * Eu
    Amix = scale * _qleft(uh, m)
    dA, Bff = _field_blocks(ms, u, Bl, theta**2)
    Aff = np.diag(ms.field_values(ks_mf.omega)).astype(complex) + dA
    gen = _assemble(ms, hpp, K1, K2, Amix, Bmix, Aff, Bff, f"H(theta={theta})")
    gen.check(1e-10)
    return gen


def assemble_HD_direct(ms: ModeSpace, ks: KernelSet, state: MeanFieldState) -> QuadraticGenerator:
    """Dressed generator at Lambda = grid-max, built entry by entry from its own formulas."""
    g = ms.grid
    u = state.u.reshape(-1)
    alpha = ms.field_values(state.alpha)
    kf, E = ms.kf, ms.plane
    Bf = ms.field_values(ks.B0)
    Gf = ms.field_values(ks.G0)
    wf = ms.field_values(ks.omega)
    dk, dx = g.dvk, g.dvx
    # <k B_x, alpha> by direct quadrature over the field modes
    c = np.stack([(E.conj() * (kf[j] * Bf)[None, :]) @ alpha * dk for j in range(g.d)])
    F = 2 * c.real
    # V(x_i - x_j) by direct quadrature over the momentum integral
    diff = ms.xs[:, :, None] - ms.xs[:, None, :]
    phase = np.exp(1j * np.einsum("dk,dij->kij", kf, diff))
    Vhat = -4 * Gf * Bf + 2 * wf * Bf**2
    Vxy = np.real(np.einsum("k,kij->ij", Vhat, phase)) * dk
    rho = np.abs(u) ** 2
    Vrho = Vxy @ rho * dx
    P = ms.mom
    Au = sum(2 * P[j] @ (c[j] * u) + 2 * c[j].conj() * (P[j] @ u) for j in range(g.d))
    pu = np.stack([P[j] @ u for j in range(g.d)])
    f = np.array([2 * np.sum(kf[:, l] * Bf[l] * (E[:, l][None, :] * np.conj(u)[None, :] * pu).sum(axis=1)) * dx
                  for l in range(ms.n_a)])
    gg = np.array([2 * np.sum(kf[:, l] * Bf[l] * (E[:, l] * rho * F).sum(axis=1)) * dx
                   for l in range(ms.n_a)])
    mu = 0.5 * np.sum(Vrho * rho) * dx + np.real(np.vdot(alpha, f + gg)) * dk
    pot = np.sum(F**2, axis=0) + Vrho - mu
    hpp = ms.lap + np.diag(pot) + sum(2 * P[j] @ np.diag(c[j]) + 2 * np.diag(c[j].conj()) @ P[j]
                                      for j in range(g.d))
    Q = np.eye(ms.n_b) - np.outer(u, u.conj()) * dx
    K1 = Q @ (np.diag(u) @ (Vxy * dx) @ np.diag(u.conj())) @ Q
    K2 = Q @ (np.diag(u) @ (Vxy * dx) @ np.diag(u)) @ Q.T
    sq = np.sqrt(dx * dk)
    Bmix = np.zeros((ms.n_b, ms.n_a), dtype=complex)
    Amix = np.zeros((ms.n_b, ms.n_a), dtype=complex)
    for l in range(ms.n_a):
        lu = 2 * Bf[l] * E[:, l] * sum(kf[j, l] * (pu[j] + F[j] * u) for j in range(g.d))
        Bmix[:, l] = sq * Q @ lu
        eb = np.conj(E[:, l]) * u * Bf[l]
        ladj = 2 * sum(kf[j, l] * (P[j] @ eb + F[j] * eb) for j in range(g.d))
        Amix[:, l] = sq * Q @ ladj
    Mk = np.zeros((ms.n_a, ms.n_a), dtype=complex)
    Mkm = np.zeros((ms.n_a, ms.n_a), dtype=complex)
    for a in range(ms.n_a):
        for b in range(ms.n_a):
            kk = kf[:, a] @ kf[:, b]
            Mk[a, b] = kk * Bf[a] * Bf[b] * np.sum(rho * E[:, a] * E[:, b]) * dx
            Mkm[a, b] = -kk * Bf[a] * Bf[b] * np.sum(rho * E[:, a] * np.conj(E[:, b])) * dx
    Aff = np.diag(wf).astype(complex) - 2 * dk * Mkm
    Bff = 2 * dk * Mk
    gen = _assemble(ms, hpp, K1, K2, Amix, Bmix, Aff, Bff, "H^D direct")
    gen.check(1e-10)
    return gen


def assemble_D_bog(ms: ModeSpace, ks_mf: KernelSet, ks_L: KernelSet, base: MeanFieldState, theta: float,
                   dressed: MeanFieldState | None = None) -> QuadraticGenerator:
    """Dressing generator at parameter theta; tau frozen at the base pair, kappa cut at Lambda."""
    g = ms.grid
    if dressed is None:
        dressed = dressing_flow_closed(ks_mf, base, theta)
    tau = kn.tau(ks_mf, base.u, base.alpha).reshape(-1)
    ut = dressed.u.reshape(-1)
    Q, _ = _projector(ms, ut)
    Bl = ms.field_values(ks_L.B)
    kappa = Q @ (1j * Bl[None, :] * ms.plane * ut[:, None])  # kappa(k, x) stored as [x, k]
    scale = np.sqrt(g.dvx * g.dvk)
    Bmix = scale * kappa
    Amix = -scale * kappa[:, ms.neg]
    zf = np.zeros((ms.n_a, ms.n_a), dtype=complex)
    zp = np.zeros((ms.n_b, ms.n_b), dtype=complex)
    gen = _assemble(ms, np.diag(tau).astype(complex), zp, zp, Amix, Bmix, zf, zf, f"D(theta={theta})")
    gen.check(1e-10)
    return gen


def pairing_orthogonality(ms: ModeSpace, gen: QuadraticGenerator, u: np.ndarray) -> float:
    """max |<u, column>| over the particle parts of every pairing column."""
    _, uh = _projector(ms, u)
    cols = np.concatenate([gen.B[: ms.n_b, :], gen.A[: ms.n_b, ms.n_b:]], axis=1)
    return float(np.max(np.abs(uh.conj() @ cols)))


def _nonlinear(gen: QuadraticGenerator, A0: np.ndarray, U: np.ndarray, V: np.ndarray):
    dA = gen.A - A0
    return (-1j * (dA @ U - gen.B @ V.conj()), -1j * (dA @ V - gen.B @ U.conj()))


def column_symplectic_defect(W: BogMatrix, W_init: BogMatrix) -> float:
    """|| Y^* J Y - Y0^* J Y0 || for the doubled column blocks Y, J = diag(1, -1)."""
    def form(X):
        Y = X.block() if X.U.shape[0] == X.U.shape[1] else np.block([[X.U, X.V], [X.V.conj(), X.U.conj()]])
        n = X.U.shape[0]
        JY = Y.copy()
        JY[n:] *= -1
        return Y.conj().T @ JY
    return float(np.linalg.norm(form(W) - form(W_init), 2))


@dataclass
class BogRun:
    W: BogMatrix
    state: MeanFieldState
    max_symplectic: float
    max_pairing: float
    steps: int


def _axpy(z, c, w):
    return (z[0] + c * w[0], z[1] + c * w[1])


def _rk4_combine(z, h, b1, b2, b3, b4):
    return (z[0] + h / 6 * (b1[0] + 2 * b2[0] + 2 * b3[0] + b4[0]),
            z[1] + h / 6 * (b1[1] + 2 * b2[1] + 2 * b3[1] + b4[1]))


def _pair_rhs(gen, z):
    r = bog_rhs(gen, BogMatrix(*z)) if z[0].shape[0] == z[0].shape[1] else None
    if r is not None:
        return (r.U, r.V)
    return (-1j * (gen.A @ z[0] - gen.B @ z[1].conj()), -1j * (gen.A @ z[1] - gen.B @ z[0].conj()))


def _defect(W: BogMatrix, W_init: BogMatrix | None) -> float:
    if W_init is None:
        return symplectic_defect(W)
    return column_symplectic_defect(W, W_init)


def evolve_bog(ms: ModeSpace, ks_mf: KernelSet, ks_L: KernelSet, state: MeanFieldState, theta: float,
               t_final: float, dt: float, method: str = "lawson", monitor: bool = False,
               abort_tol: float = 1e-6, W_init: BogMatrix | None = None) -> BogRun:
    """Co-integrate the theta-flow and the Bogoliubov matrix of H^Lambda_theta.

    "lawson" runs RK4 in the interaction picture of -Delta (+) omega; "rk4" is the
    plain scheme (stiff at the grid edge, kept for comparison).  W_init may hold
    a subset of columns (n x r blocks); the result is then V(t) composed with it.
    """
    n = max(int(round(abs(t_final) / dt)), 1) if t_final else 0
    W = BogMatrix.identity(ms.n) if W_init is None else W_init
    if n == 0:
        return BogRun(W, state.copy(), 0.0, 0.0, 0)
    h = t_final / n
    cache = _HCache(ms, ks_mf, ks_L, theta)
    A0 = ms.free_part(ks_mf.omega)
    lam, Ev = np.linalg.eigh(ms.lap)
    Pp = (Ev * np.exp(-1j * lam * h / 2)) @ Ev.conj().T
    pf = np.exp(-1j * np.diag(A0[ms.n_b:, ms.n_b:]).real * h / 2)[:, None]
    nb = ms.n_b
    rhs_mf = lambda u, a: theta_rhs(ks_mf, u, a, theta)
    y = (state.u, state.alpha)
    Z = (W.U, W.V)
    max_sym = max_pair = 0.0

    def gen_at(yy):
        gen = assemble_H_bog(ms, ks_mf, ks_L, MeanFieldState(*yy), theta, cache, check=False)
        if monitor:
            nonlocal max_pair
            max_pair = max(max_pair, pairing_orthogonality(ms, gen, yy[0]))
        return gen

    # the free flow multiplies both U and V from the left by P
    def lin(z):
        return tuple(np.concatenate([Pp @ m[:nb], pf * m[nb:]]) for m in z)

    N = lambda gen, z: _nonlinear(gen, A0, *z)
    for step in range(n):
        k1 = rhs_mf(*y)
        y2 = _axpy(y, h / 2, k1)
        k2 = rhs_mf(*y2)
        y3 = _axpy(y, h / 2, k2)
        k3 = rhs_mf(*y3)
        y4 = _axpy(y, h, k3)
        k4 = rhs_mf(*y4)
        g1, g2, g3, g4 = gen_at(y), gen_at(y2), gen_at(y3), gen_at(y4)
        if method == "lawson":
            zh = lin(Z)
            a1 = lin(N(g1, Z))
            a2 = N(g2, _axpy(zh, h / 2, a1))
            a3 = N(g3, _axpy(zh, h / 2, a2))
            a4 = N(g4, lin(_axpy(zh, h, a3)))
            acc = lin((zh[0] + h / 6 * (a1[0] + 2 * a2[0] + 2 * a3[0]),
                       zh[1] + h / 6 * (a1[1] + 2 * a2[1] + 2 * a3[1])))
            Z = _axpy(acc, h / 6, a4)
        elif method == "rk4":
            b1 = _pair_rhs(g1, Z)
            b2 = _pair_rhs(g2, _axpy(Z, h / 2, b1))
            b3 = _pair_rhs(g3, _axpy(Z, h / 2, b2))
            b4 = _pair_rhs(g4, _axpy(Z, h, b3))
            Z = _rk4_combine(Z, h, b1, b2, b3, b4)
        else:
            raise ValueError(f"unknown method {method!r}")
        y = _rk4_combine(y, h, k1, k2, k3, k4)
        if monitor or step == n - 1:
            sd = _defect(BogMatrix(*Z), W_init)
            max_sym = max(max_sym, sd)
            if not np.isfinite(sd) or sd > abort_tol:
                raise BogoliubovPropagationError(
                    f"symplectic defect {sd:.3e} at t={state.t + (step + 1) * h:.4g}; refine dt below {h:.3g}")
    return BogRun(BogMatrix(*Z), MeanFieldState(y[0], y[1], state.t + t_final), max_sym, max_pair, n)


def evolve_dressing_bog(ms: ModeSpace, ks_mf: KernelSet, ks_L: KernelSet, base: MeanFieldState, theta: float,
                        dtheta: float, monitor: bool = False, W_init: BogMatrix | None = None,
                        reverse: bool = False) -> BogRun:
    """Bogoliubov matrix of the dressing generator from 0 to theta (plain RK4; not stiff).

    With reverse=True the flow runs from theta back to 0, which applies the inverse.
    """
    n = max(int(round(abs(theta) / dtheta)), 1) if theta else 0
    W = BogMatrix.identity(ms.n) if W_init is None else W_init
    if n == 0:
        return BogRun(W, base.copy(), 0.0, 0.0, 0)
    h = theta / n
    max_sym = max_pair = 0.0

    def gen(s):
        d = dressing_flow_closed(ks_mf, base, s)
        out = assemble_D_bog(ms, ks_mf, ks_L, base, s, d)
        if monitor:
            nonlocal max_pair
            max_pair = max(max_pair, pairing_orthogonality(ms, out, d.u))
        return out

    Z = (W.U, W.V)
    sgn, s0 = (-1.0, theta) if reverse else (1.0, 0.0)
    hs = sgn * h
    g_next = gen(s0)
    for step in range(n):
        s = s0 + step * hs
        g1, gm, g_next = g_next, gen(s + hs / 2), gen(s + hs)
        b1 = _pair_rhs(g1, Z)
        b2 = _pair_rhs(gm, _axpy(Z, hs / 2, b1))
        b3 = _pair_rhs(gm, _axpy(Z, hs / 2, b2))
        b4 = _pair_rhs(g_next, _axpy(Z, hs, b3))
        Z = _rk4_combine(Z, hs, b1, b2, b3, b4)
        if monitor:
            max_sym = max(max_sym, _defect(BogMatrix(*Z), W_init))
    if not monitor:
        max_sym = _defect(BogMatrix(*Z), W_init)
    end = base.copy() if reverse else dressing_flow_closed(ks_mf, base, theta)
    return BogRun(BogMatrix(*Z), end, max_sym, max_pair, n)


def resolved_columns(ms: ModeSpace, p_res: float | None) -> BogMatrix:
    """Isometry onto particle plane waves with |p| <= p_res plus every field mode."""
    if p_res is None:
        return BogMatrix.identity(ms.n)
    g = ms.grid
    sel = np.flatnonzero((g.kabs <= p_res * (1 + 1e-12)).reshape(-1))
    kp = np.stack([kc.reshape(-1)[sel] for kc in g.k])
    waves = np.exp(1j * (ms.xs.T @ kp)) / np.sqrt(g.size)
    r = sel.size + ms.n_a
    U = np.zeros((ms.n, r), dtype=complex)
    U[: ms.n_b, : sel.size] = waves
    U[ms.n_b:, sel.size:] = np.eye(ms.n_a)
    return BogMatrix(U, np.zeros_like(U))


@dataclass
class IdentityReport:
    defect: float
    theta: float
    cutoff: float
    t: float
    dt: float
    p_res: float | None
    symplectic: float
    matrix: np.ndarray | None = field(default=None, repr=False)  # doubled defect block


def dressing_identity_report(ms: ModeSpace, ks_mf: KernelSet, ks_L: KernelSet, state: MeanFieldState,
                             theta: float, t: float, dt: float, dtheta: float | None = None,
                             p_res: float | None = 4.0, method: str = "lawson") -> IdentityReport:
    """Defect of V0(t) = W_t(theta)^{-1} V_theta(t) W_0(theta) on the resolved columns.

    The scalar phase drops out at matrix level.  p_res=None measures the full
    doubled space, where edge-of-grid aliasing leaves an O(1) defect.
    """
    dtheta = dt if dtheta is None else dtheta
    X = resolved_columns(ms, p_res)
    r0 = evolve_bog(ms, ks_mf, ks_L, state, 0.0, t, dt, method, W_init=X)
    w0 = evolve_dressing_bog(ms, ks_mf, ks_L, state, theta, dtheta, W_init=X)
    rth = evolve_bog(ms, ks_mf, ks_L, dressing_flow_closed(ks_mf, state, theta), theta, t, dt, method,
                     W_init=w0.W)
    wt = evolve_dressing_bog(ms, ks_mf, ks_L, r0.state, theta, dtheta, W_init=rth.W, reverse=True)
    dU = r0.W.U - wt.W.U
    dV = r0.W.V - wt.W.V
    D = np.block([[dU, dV], [dV.conj(), dU.conj()]])
    sym = max(r0.max_symplectic, w0.max_symplectic, rth.max_symplectic, wt.max_symplectic)
    return IdentityReport(float(np.linalg.norm(D, 2)), theta, ks_L.cutoff, t, dt, p_res, sym, D)


def dressing_identity_defect(ms: ModeSpace, ks_mf: KernelSet, ks_L: KernelSet, state: MeanFieldState,
                             theta: float, t: float, dt: float, dtheta: float | None = None,
                             p_res: float | None = 4.0, method: str = "lawson") -> float:
    return dressing_identity_report(ms, ks_mf, ks_L, state, theta, t, dt, dtheta, p_res, method).defect
