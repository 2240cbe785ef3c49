"""Exact truncated Fock-space oracle for the cutoff Nelson model at small N.

A basis vector is an occupation tuple, particle modes first and field modes
second, in lexicographic order.  The space is the tensor product of a particle
sector and a field sector, so the global index is i_particle * dim_field +
i_field.  Operators are realized as P (ladder string) P with P the projector
onto the retained occupations; normal-ordered strings never leave the retained
set at intermediate steps.

Particle modes are plane waves e^{ipx}/sqrt(L^d) of a Grid, field modes are
grid momenta.  Field operators carry the discrete normalization
a_k(continuum) = a_j / sqrt(dk^d), so a coherent amplitude alpha(k) becomes
sqrt(dk^d) alpha(k) per mode.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm

from .bogoliubov import (ModeSpace, QuadraticGenerator, _HCache, assemble_D_bog, assemble_H_bog,
                         make_mode_space)
from .kernels import KernelSet, make_kernels
from .meanfield import MeanFieldState, dressing_flow_closed, energy, evolve, theta_rhs
from .renorm import discrete_pair_constant
from .spectral import Grid, make_grid

log = logging.getLogger(__name__)

__all__ = [
    "Sector",
    "ModeSet",
    "FockSpace",
    "FockVector",
    "ManyBodyOperator",
    "build_space",
    "excitation_space",
    "plane_wave_modes",
    "build_nelson_hamiltonian",
    "build_dressed_hamiltonian",
    "dressing_generator",
    "weyl",
    "coherent_product_state",
    "dressed_initial_state",
    "propagate",
    "beta_functional",
    "gamma_functional",
    "reduced_densities",
    "excitation_map",
    "excitation_adjoint",
    "QuadraticFock",
    "quad_fock_operator",
    "heisenberg_defect",
    "PhaseReport",
    "phase_defect",
    "NormApproxReport",
    "norm_approximation_defect",
    "conjugation_defect",
    "BetaReport",
    "beta_trend_point",
    "tiny_instance",
    "minimal_phase_instance",
    "TruncationError",
    "DEFAULT_DIM_CAP",
]

DEFAULT_DIM_CAP = 2**22


class TruncationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# occupation sectors


def sector_dimension(rule: str, m: int, cap: int) -> int:
    if m == 0:
        return 1
    if rule == "fixed":
        return math.comb(cap + m - 1, cap)
    if rule == "total":
        return math.comb(cap + m, m)
    if rule == "each":
        return (cap + 1) ** m
    raise ValueError(f"unknown sector rule {rule!r}")


def _compositions(m: int, total: int):
    """Occupation tuples of m modes summing to total, lexicographically ascending."""
    if m == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(m - 1, total - first):
            yield (first,) + rest


@dataclass(frozen=True)
class Sector:
    """Occupations of m modes: 'fixed' (sum == cap), 'total' (sum <= cap) or 'each' (every entry <= cap)."""

    m: int
    rule: str
    cap: int

    def __post_init__(self):
        if self.rule not in ("fixed", "total", "each"):
            raise ValueError(f"unknown sector rule {self.rule!r}")
        if self.m < 0 or self.cap < 0:
            raise ValueError("mode count and cap must be nonnegative")
        if float(self.cap + 1) ** self.m >= 2.0**62:
            raise TruncationError("occupation codes overflow int64")

    @property
    def dim(self) -> int:
        return sector_dimension(self.rule, self.m, self.cap)

    @cached_property
    def occ(self) -> np.ndarray:
        m, cap = self.m, self.cap
        if m == 0:
            return np.zeros((1, 0), dtype=np.int64)
        if self.rule == "each":
            grids = np.indices((cap + 1,) * m).reshape(m, -1).T
            return np.ascontiguousarray(grids, dtype=np.int64)
        totals = [cap] if self.rule == "fixed" else range(cap + 1)
        rows = [c for n in totals for c in _compositions(m, n)]
        occ = np.array(rows, dtype=np.int64)
        return occ[np.argsort(self._encode(occ), kind="stable")]

    @cached_property
    def _weights(self) -> np.ndarray:
        return (self.cap + 1) ** np.arange(self.m - 1, -1, -1, dtype=np.int64)

    def _encode(self, occ: np.ndarray) -> np.ndarray:
        return occ @ self._weights

    @cached_property
    def codes(self) -> np.ndarray:
        return self._encode(self.occ)

    @cached_property
    def totals(self) -> np.ndarray:
        return self.occ.sum(axis=1)

    def index(self, occ: np.ndarray) -> np.ndarray:
        """Row indices of the given occupations, -1 where not retained."""
        occ = np.atleast_2d(np.asarray(occ, dtype=np.int64))
        ok = np.all((occ >= 0) & (occ <= self.cap), axis=1)
        tot = occ.sum(axis=1)
        if self.rule == "fixed":
            ok &= tot == self.cap
        elif self.rule == "total":
            ok &= tot <= self.cap
        codes = self._encode(np.where(ok[:, None], occ, 0))
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, self.codes.size - 1)
        ok &= self.codes[pos] == codes
        return np.where(ok, pos, -1)

    def string(self, ops, target: "Sector | None" = None, coef: complex = 1.0) -> sp.csr_matrix:
        """Matrix of the written product of ladder operators ops = [(mode, dagger), ...]."""
        target = self if target is None else target
        occ = self.occ.copy()
        amp = np.full(occ.shape[0], complex(coef))
        alive = np.ones(occ.shape[0], dtype=bool)
        for mode, dag in reversed(list(ops)):
            if dag:
                amp *= np.sqrt(occ[:, mode] + 1.0)
                occ[:, mode] += 1
            else:
                alive &= occ[:, mode] > 0
                amp *= np.sqrt(np.maximum(occ[:, mode], 0))
                occ[:, mode] -= 1
        rows = target.index(np.where(alive[:, None], occ, -1))
        keep = alive & (rows >= 0)
        cols = np.flatnonzero(keep)
        return sp.csr_matrix((amp[keep], (rows[keep], cols)), shape=(target.dim, self.dim))

    def number(self, weights) -> sp.csr_matrix:
        """Diagonal operator sum_j w_j n_j."""
        w = np.asarray(weights)
        return sp.diags(self.occ @ w if self.m else np.zeros(1), format="csr").astype(complex)

    def one_body(self, T: np.ndarray) -> sp.csr_matrix:
        """Second quantization sum_ij T_ij c_i^* c_j (number conserving)."""
        out = sp.csr_matrix((self.dim, self.dim), dtype=complex)
        for i, j in zip(*np.nonzero(np.abs(T) > 0)):
            out = out + self.string([(i, True), (j, False)], coef=T[i, j])
        return out


# ---------------------------------------------------------------------------
# modes and spaces


def _wrap(n: np.ndarray, M: int) -> np.ndarray:
    return (n + M // 2) % M - M // 2


@dataclass(frozen=True)
class ModeSet:
    """Integer grid momenta of the particle plane waves and of the field modes."""

    grid: Grid
    particle: np.ndarray  # (m_b, d) ints
    field: np.ndarray     # (m_a, d) ints
    wrap: bool = True

    @property
    def m_b(self) -> int:
        return int(self.particle.shape[0])

    @property
    def m_a(self) -> int:
        return int(self.field.shape[0])

    @cached_property
    def p(self) -> np.ndarray:
        return self.particle * self.grid.dk

    @cached_property
    def k(self) -> np.ndarray:
        return self.field * self.grid.dk

    @cached_property
    def kabs(self) -> np.ndarray:
        return np.sqrt(np.sum(self.k**2, axis=1))

    @cached_property
    def omega(self) -> np.ndarray:
        return np.sqrt(self.kabs**2 + 1.0)

    @cached_property
    def _plookup(self) -> dict:
        return {tuple(r): i for i, r in enumerate(self.particle)}

    def multiplication(self, q: np.ndarray) -> tuple[np.ndarray, int]:
        """Matrix of e^{iqx} on the particle modes (q an integer momentum) and the dropped count."""
        T = np.zeros((self.m_b, self.m_b), dtype=complex)
        dropped = 0
        for j, pj in enumerate(self.particle):
            tgt = pj + q
            if self.wrap:
                tgt = _wrap(tgt, self.grid.M)
            i = self._plookup.get(tuple(tgt))
            if i is None:
                dropped += 1
            else:
                T[i, j] = 1.0
        return T, dropped

    @cached_property
    def waves(self) -> np.ndarray:
        """Plane waves as orthonormal site vectors, shape (grid.size, m_b)."""
        g = self.grid
        xs = np.stack([xc.reshape(-1) for xc in g.x])
        return np.exp(1j * (xs.T @ self.p.T)) / np.sqrt(g.size)

    def restrict_u(self, u: np.ndarray, tol: float = 1e-8) -> np.ndarray:
        """Plane-wave coefficients of a grid wave function; mass outside the modes above tol is rejected."""
        uh = u.reshape(-1) * np.sqrt(self.grid.dvx)
        c = self.waves.conj().T @ uh
        leak = float(np.vdot(uh, uh).real - np.vdot(c, c).real)
        if leak > tol:
            raise TruncationError(f"u has mass {leak:.3e} outside the particle modes")
        return c

    def field_index(self) -> np.ndarray:
        """Flat grid indices of the field modes."""
        g = self.grid
        idx = (self.field + g.M // 2).astype(int)
        return np.ravel_multi_index(tuple(idx.T), g.shape)

    def restrict_alpha(self, alpha: np.ndarray) -> np.ndarray:
        """Mode amplitudes sqrt(dk^d) alpha(k_j)."""
        return alpha.reshape(-1)[self.field_index()] * np.sqrt(self.grid.dvk)


def plane_wave_modes(grid: Grid, p_max: float | None = None, cutoff: float | None = None,
                     wrap: bool = True) -> ModeSet:
    """Particle momenta |p| <= p_max (all grid momenta if None) and field momenta |k| <= cutoff, Nyquist excluded."""
    n = np.stack([c.reshape(-1) for c in np.meshgrid(*([np.arange(-grid.M // 2, grid.M // 2)] * grid.d),
                                                      indexing="ij")], axis=1)
    kabs = np.sqrt(np.sum((n * grid.dk) ** 2, axis=1))
    nyq = np.any(n == -grid.M // 2, axis=1)
    pm = np.ones(len(n), dtype=bool) if p_max is None else kabs <= p_max * (1 + 1e-12)
    lam = grid.k_max if cutoff is None else cutoff
    fm = (kabs <= lam * (1 + 1e-12)) & ~nyq
    return ModeSet(grid, n[pm], n[fm], wrap)


@dataclass(frozen=True)
class FockSpace:
    particles: Sector
    field: Sector
    modes: ModeSet | None = None

    @property
    def N(self) -> int | None:
        return self.particles.cap if self.particles.rule == "fixed" else None

    @property
    def m_b(self) -> int:
        return self.particles.m

    @property
    def m_a(self) -> int:
        return self.field.m

    @property
    def n_max(self) -> int:
        return self.field.cap

    @property
    def dim(self) -> int:
        return self.particles.dim * self.field.dim

    def basis(self, i: int) -> tuple[int, ...]:
        ip, jf = divmod(int(i), self.field.dim)
        return tuple(self.particles.occ[ip]) + tuple(self.field.occ[jf])

    def index(self, occ) -> int:
        occ = np.asarray(occ, dtype=np.int64)
        ip = self.particles.index(occ[: self.m_b])[0]
        jf = self.field.index(occ[self.m_b:])[0]
        if ip < 0 or jf < 0:
            return -1
        return int(ip * self.field.dim + jf)

    def kron(self, P=None, F=None) -> sp.csr_matrix:
        P = sp.identity(self.particles.dim, dtype=complex, format="csr") if P is None else P
        F = sp.identity(self.field.dim, dtype=complex, format="csr") if F is None else F
        return sp.kron(P, F, format="csr")

    def field_occupancy_at_cap(self, psi: np.ndarray) -> float:
        """Probability weight on states with some field mode at n_max."""
        at = np.any(self.field.occ == self.field.cap, axis=1) if self.m_a else np.zeros(1, bool)
        w = np.abs(psi.reshape(self.particles.dim, self.field.dim)) ** 2
        return float(w[:, at].sum())


def _check_dim(dim: int, cap: int) -> None:
    if dim > cap:
        raise TruncationError(f"Fock dimension {dim} exceeds the cap {cap}")


def build_space(N: int, modes: ModeSet, n_max: int, dim_cap: int = DEFAULT_DIM_CAP) -> FockSpace:
    """N bosons in the particle modes tensored with field occupations <= n_max."""
    if N < 1 or modes.m_b < 2 or modes.m_a < 1 or n_max < 1:
        raise ValueError("need N >= 1, m_b >= 2, m_a >= 1, n_max >= 1")
    dim = sector_dimension("fixed", modes.m_b, N) * sector_dimension("each", modes.m_a, n_max)
    _check_dim(dim, dim_cap)
    return FockSpace(Sector(modes.m_b, "fixed", N), Sector(modes.m_a, "each", n_max), modes)


def excitation_space(modes: ModeSet | None, m_b: int, m_a: int, particle_cap: int, n_max: int,
                     rule: str = "total", dim_cap: int = DEFAULT_DIM_CAP) -> FockSpace:
    """Fock space with a variable particle number (rule 'total' or 'each') for quadratic generators."""
    dim = sector_dimension(rule, m_b, particle_cap) * sector_dimension("each", m_a, n_max)
    _check_dim(dim, dim_cap)
    return FockSpace(Sector(m_b, rule, particle_cap), Sector(m_a, "each", n_max), modes)


# ---------------------------------------------------------------------------
# vectors and operators


@dataclass
class FockVector:
    space: FockSpace
    amp: np.ndarray

    def __post_init__(self):
        if self.amp.shape != (self.space.dim,):
            raise ValueError("amplitude length does not match the space")
        if not np.all(np.isfinite(self.amp)):
            raise FloatingPointError("non-finite Fock amplitudes")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amp))

    def as_matrix(self) -> np.ndarray:
        return self.amp.reshape(self.space.particles.dim, self.space.field.dim)


@dataclass
class ManyBodyOperator:
    matrix: sp.csr_matrix
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __matmul__(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def hermiticity_defect(self) -> float:
        M = self.matrix
        scale = max(sp.linalg.norm(M), 1e-300)
        return float(sp.linalg.norm(M - M.conj().T) / scale)

    def check_hermitian(self, tol: float = 1e-12) -> None:
        d = self.hermiticity_defect()
        if d > tol:
            raise ValueError(f"{self.label}: hermiticity defect {d:.3e}")


def _expect(op: sp.spmatrix, psi: np.ndarray) -> complex:
    return complex(np.vdot(psi, op @ psi))


def _field_apply(space: FockSpace, Wf: np.ndarray, psi: np.ndarray) -> np.ndarray:
    X = psi.reshape(space.particles.dim, space.field.dim)
    return (X @ Wf.T).reshape(-1)


# ---------------------------------------------------------------------------
# Hamiltonians


def _field_kernels(modes: ModeSet, cutoff: float | None, coupling: float):
    mask = np.ones(modes.m_a, bool) if cutoff is None else modes.kabs <= cutoff * (1 + 1e-12)
    G0 = coupling * modes.omega**-0.5
    B0 = G0 / (modes.kabs**2 + modes.omega)
    return np.where(mask, G0, 0.0), np.where(mask, B0, 0.0)


def _ladders(space: FockSpace):
    f = space.field
    a = [f.string([(j, False)]) for j in range(f.m)]
    return a, [x.conj().T.tocsr() for x in a]


def _free_part(space: FockSpace) -> sp.csr_matrix:
    modes = space.modes
    kin = space.particles.number(np.sum(modes.p**2, axis=1))
    return space.kron(kin, None) + space.kron(None, space.field.number(modes.omega))


def _mult_ops(space: FockSpace, sign: int):
    """dGamma(e^{sign i k x}) for each field mode, plus the one-body matrices and dropped counts."""
    ops, mats, dropped = [], [], 0
    for kj in space.modes.field:
        T, d = space.modes.multiplication(sign * kj)
        mats.append(T)
        ops.append(space.particles.one_body(T))
        dropped += d
    return ops, mats, dropped


def build_nelson_hamiltonian(space: FockSpace, cutoff: float | None = None, coupling: float = 1.0,
                             check: bool = True) -> ManyBodyOperator:
    """sum_j [-Delta_j + N^{-1/2} sum_k sqrt(dk) G(k)(e^{-ikx_j} a_k^* + h.c.)] + dGamma(omega)."""
    N, modes = space.N, space.modes
    if N is None or modes is None:
        raise ValueError("needs a fixed-N space with plane-wave modes")
    G, _ = _field_kernels(modes, cutoff, coupling)
    a, ad = _ladders(space)
    emk, _, dropped = _mult_ops(space, -1)
    H = _free_part(space)
    c = np.sqrt(modes.grid.dvk / N) * G
    for j in range(modes.m_a):
        if c[j]:
            X = c[j] * space.kron(emk[j], ad[j])
            H = H + X + X.conj().T
    if dropped:
        log.info("Nelson Hamiltonian: %d hopping transitions left the particle modes", dropped)
    op = ManyBodyOperator(H.tocsr(), "H_N", {"N": N, "cutoff": cutoff, "coupling": coupling,
                                              "dropped_transitions": dropped})
    if check:
        op.check_hermitian()
    return op


def build_dressed_hamiltonian(space: FockSpace, cutoff: float | None = None, coupling: float = 1.0,
                              check: bool = True) -> ManyBodyOperator:
    """Dressed Hamiltonian: free part, N^{-1/2} sum A_x, pair potential V and the kB quadratic terms."""
    N, modes = space.N, space.modes
    if N is None or modes is None:
        raise ValueError("needs a fixed-N space with plane-wave modes")
    g = modes.grid
    dk = g.dvk
    G, B = _field_kernels(modes, cutoff, coupling)
    kB = modes.k * B[:, None]  # (m_a, d)
    a, ad = _ladders(space)
    part = space.particles
    H = _free_part(space)
    mats_p, mats_m, dropped = [], [], 0
    for kj in modes.field:
        Tp, d1 = modes.multiplication(kj)
        Tm, d2 = modes.multiplication(-kj)
        mats_p.append(Tp)
        mats_m.append(Tm)
        dropped += d1 + d2
    P = [np.diag(modes.p[:, j]).astype(complex) for j in range(g.d)]
    sq = np.sqrt(dk)
    # A_x = 2 (p . a(kB_x) + a^*(kB_x) . p)
    for j in range(modes.m_a):
        if not B[j]:
            continue
        T = sum(kB[j, c] * (P[c] @ mats_p[j]) for c in range(g.d))
        X = (2 * sq / np.sqrt(N)) * space.kron(part.one_body(T), a[j])
        H = H + X + X.conj().T
    # (1/N) sum_i V(x_i - x_j) over i < j with V(x) = sum_k dk W(k) e^{ikx}
    W = (-4 * G * B + 2 * modes.omega * B**2)
    for j in range(modes.m_a):
        if not W[j]:
            continue
        opp, opm = part.one_body(mats_p[j]), part.one_body(mats_m[j])
        pair = opp @ opm - part.one_body(mats_p[j] @ mats_m[j])
        H = H + space.kron((0.5 * dk * W[j] / N) * pair, None)
    # (1/N) sum_i (a(kB)^2 + 2 a^*(kB) a(kB) + a^*(kB)^2)
    for j in range(modes.m_a):
        for l in range(modes.m_a):
            w = float(np.dot(kB[j], kB[l]))
            if not w:
                continue
            w *= dk / N
            X = w * space.kron(part.one_body(mats_p[j] @ mats_p[l]), a[j] @ a[l])
            H = H + X + X.conj().T
            H = H + 2 * w * space.kron(part.one_body(mats_m[j] @ mats_p[l]), ad[j] @ a[l])
    op = ManyBodyOperator(H.tocsr(), "H_N^D", {"N": N, "cutoff": cutoff, "coupling": coupling,
                                                "dropped_transitions": dropped})
    if check:
        op.check_hermitian()
    return op


def dressing_generator(space: FockSpace, cutoff: float | None = None, coupling: float = 1.0,
                       K: float = 0.0) -> sp.csr_matrix:
    """Antihermitian S = sum_k sqrt(dk) B(k) 1_{|k|>=K} (dGamma(e^{-ikx}) a_k^* - h.c.).

    The dressing is W^D(theta) = exp(theta N^{-1/2} S).
    """
    modes = space.modes
    _, B = _field_kernels(modes, cutoff, coupling)
    B = np.where(modes.kabs >= K * (1 - 1e-12), B, 0.0)
    a, ad = _ladders(space)
    emk, _, _ = _mult_ops(space, -1)
    S = sp.csr_matrix((space.dim, space.dim), dtype=complex)
    for j in range(modes.m_a):
        if B[j]:
            X = np.sqrt(modes.grid.dvk) * B[j] * space.kron(emk[j], ad[j])
            S = S + X - X.conj().T
    return S.tocsr()


# ---------------------------------------------------------------------------
# Weyl operators and states


def weyl_field_block(space: FockSpace, f_modes: np.ndarray) -> np.ndarray:
    """Dense W(f) = exp(a^*(f) - a(f)) on the field sector; f given as mode amplitudes."""
    a, ad = _ladders(space)
    X = sp.csr_matrix((space.field.dim, space.field.dim), dtype=complex)
    for j, fj in enumerate(f_modes):
        if fj:
            X = X + fj * ad[j] - np.conj(fj) * a[j]
    return expm(X.toarray())


def weyl(space: FockSpace, f: np.ndarray, modes_given: bool = True) -> ManyBodyOperator:
    """W(f) tensored with the particle identity; f as mode amplitudes or, if modes_given is False, a grid array."""
    fm = np.asarray(f) if modes_given else space.modes.restrict_alpha(f)
    Wf = weyl_field_block(space, fm)
    un = float(np.linalg.norm(Wf.conj().T @ Wf - np.eye(Wf.shape[0]), 2))
    return ManyBodyOperator(space.kron(None, sp.csr_matrix(Wf)), "W(f)",
                            {"field_block": Wf, "unitarity_defect": un})


def _particle_product(space_particles: Sector, c: np.ndarray) -> np.ndarray:
    """(b^*(u))^N / sqrt(N!) on the vacuum, as particle-sector amplitudes."""
    occ = space_particles.occ
    N = space_particles.cap
    logf = np.array([math.lgamma(n + 1) for n in range(N + 1)])
    mag = np.exp(0.5 * (math.lgamma(N + 1) - logf[occ].sum(axis=1)))
    return mag * np.prod(np.power(c[None, :], occ), axis=1)


def coherent_product_state(space: FockSpace, u: np.ndarray, alpha: np.ndarray) -> FockVector:
    """u^{(x)N} (x) W(sqrt(N) alpha) Omega from grid arrays u and alpha."""
    N, modes = space.N, space.modes
    c = modes.restrict_u(u)
    pp = _particle_product(space.particles, c)
    vac = np.zeros(space.field.dim, dtype=complex)
    vac[0] = 1.0
    fz = weyl_field_block(space, np.sqrt(N) * modes.restrict_alpha(alpha)) @ vac
    vec = FockVector(space, np.kron(pp, fz))
    dev = abs(vec.norm - 1.0)
    if dev > 1e-8:
        log.info("coherent product state: norm deviation %.3e from truncation", dev)
    return vec


def dressed_initial_state(space: FockSpace, u: np.ndarray, alpha: np.ndarray, K: float,
                          cutoff: float | None = None, coupling: float = 1.0) -> FockVector:
    """prod_j W^*(N^{-1/2} B_{K,x_j}) applied to the coherent product state."""
    psi = coherent_product_state(space, u, alpha)
    if K > space.modes.kabs.max() * (1 + 1e-12):
        return psi
    S = dressing_generator(space, cutoff, coupling, K)
    # exp(-N^{-1/2} S) = exp(-i H' t) with H' = i N^{-1/2} S and t = -1
    Hp = 1j * S / np.sqrt(space.N)
    out = propagate(space, Hp, psi.amp, -1.0)
    return FockVector(space, out)


# ---------------------------------------------------------------------------
# propagation


def _krylov_step(H, v: np.ndarray, h: float, m: int):
    """exp(-i h H) v by Lanczos with full reorthogonalization; returns (result, error estimate)."""
    beta0 = np.linalg.norm(v)
    if beta0 == 0:
        return v.copy(), 0.0
    n = v.size
    m = min(m, n)
    V = np.zeros((n, m + 1), dtype=complex)
    al = np.zeros(m)
    be = np.zeros(m)
    V[:, 0] = v / beta0
    k = m
    for j in range(m):
        w = H @ V[:, j]
        al[j] = np.vdot(V[:, j], w).real
        w = w - al[j] * V[:, j] - (be[j - 1] * V[:, j - 1] if j else 0)
        w -= V[:, : j + 1] @ (V[:, : j + 1].conj().T @ w)
        be[j] = np.linalg.norm(w)
        if be[j] < 1e-13 * max(abs(al[j]), 1.0):
            k = j + 1
            break
        V[:, j + 1] = w / be[j]
    T = np.diag(al[:k]) + np.diag(be[: k - 1], 1) + np.diag(be[: k - 1], -1)
    y = expm(-1j * h * T)[:, 0]
    err = 0.0 if k < m or k == n else float(be[k - 1] * abs(y[-1]) * beta0)
    return beta0 * (V[:, :k] @ y), err


def _norm_bound(H) -> float:
    if sp.issparse(H):
        return float(abs(H).sum(axis=1).max())
    return float(np.abs(H).sum(axis=1).max())


def propagate(space: FockSpace, H, psi: np.ndarray, t: float, dt: float | None = None,
              krylov_dim: int = 30, tol: float = 1e-10, method: str = "krylov") -> np.ndarray:
    """exp(-i t H) psi; Krylov steps with |H| dt <= 5 and step halving on the a posteriori error."""
    H = H.matrix if isinstance(H, ManyBodyOperator) else H
    psi = np.asarray(psi, dtype=complex)
    if t == 0:
        return psi.copy()
    if method == "dense":
        if space.dim > 4000:
            raise ValueError("dense propagation is restricted to small spaces")
        Hd = H.toarray() if sp.issparse(H) else H
        return expm(-1j * t * Hd) @ psi
    if method != "krylov":
        raise ValueError(f"unknown method {method!r}")
    nb = max(_norm_bound(H), 1e-300)
    h = min(abs(t), 5.0 / nb, abs(dt) if dt else abs(t))
    sgn = np.sign(t)
    done, out = 0.0, psi
    while done < abs(t) * (1 - 1e-14):
        step = min(h, abs(t) - done)
        for _ in range(40):
            cand, err = _krylov_step(H, out, sgn * step, krylov_dim)
            if err <= tol:
                break
            step /= 2
        else:
            raise RuntimeError("Krylov propagation did not converge")
        out = cand
        done += step
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite amplitudes in propagation")
    return out


# ---------------------------------------------------------------------------
# functionals


def reduced_densities(space: FockSpace, psi: np.ndarray):
    """gamma10[i, j] = <b_j^* b_i> and gamma01[k, l] = <a_l^* a_k> in the mode bases."""
    X = psi.reshape(space.particles.dim, space.field.dim)
    mb, ma = space.m_b, space.m_a
    g10 = np.zeros((mb, mb), dtype=complex)
    rho_p = X @ X.conj().T  # particle reduced state (transposed convention handled below)
    rho_f = X.T @ X.conj()
    for i in range(mb):
        for j in range(mb):
            op = space.particles.string([(j, True), (i, False)])
            g10[i, j] = np.sum(op.multiply(rho_p.T)) if op.nnz else 0.0
    g01 = np.zeros((ma, ma), dtype=complex)
    for k in range(ma):
        for l in range(ma):
            op = space.field.string([(l, True), (k, False)])
            g01[k, l] = np.sum(op.multiply(rho_f.T)) if op.nnz else 0.0
    return g10, g01


def _shifted(space: FockSpace, psi: np.ndarray, alpha_modes: np.ndarray) -> np.ndarray:
    """W^*(f) psi for mode amplitudes f."""
    Wf = weyl_field_block(space, alpha_modes)
    return _field_apply(space, Wf.conj().T, psi)


def beta_functional(space: FockSpace, psi: np.ndarray, u: np.ndarray, alpha: np.ndarray) -> tuple[float, float]:
    """(1 - <u, gamma10 u>/N, N^{-1} <W^* psi, N_a W^* psi>) with W = W(sqrt(N) alpha)."""
    N, modes = space.N, space.modes
    c = modes.restrict_u(u)
    g10, _ = reduced_densities(space, psi)
    bp = 1.0 - float(np.vdot(c, g10 @ c).real) / N
    phi = _shifted(space, psi, np.sqrt(N) * modes.restrict_alpha(alpha))
    na = space.kron(None, space.field.number(np.ones(space.m_a)))
    bf = float(_expect(na, phi).real) / N
    return bp, bf


def gamma_functional(space: FockSpace, psi: np.ndarray, u: np.ndarray, alpha: np.ndarray) -> float:
    """N^{-1} <dGamma_b(q p^2 q)> + N^{-1} <W^* psi, dGamma_a(omega) W^* psi>."""
    N, modes = space.N, space.modes
    c = modes.restrict_u(u)
    q = np.eye(modes.m_b) - np.outer(c, c.conj())
    T = q @ np.diag(np.sum(modes.p**2, axis=1)) @ q
    kin = _expect(space.kron(space.particles.one_body(T), None), psi).real
    phi = _shifted(space, psi, np.sqrt(N) * modes.restrict_alpha(alpha))
    fe = _expect(space.kron(None, space.field.number(modes.omega)), phi).real
    return float((kin + fe) / N)


# ---------------------------------------------------------------------------
# excitation map


def _embed(src: Sector, dst: Sector) -> np.ndarray:
    idx = dst.index(src.occ)
    if np.any(idx < 0):
        raise ValueError("sector does not embed")
    return idx


def _b_of(sector: Sector, c: np.ndarray) -> sp.csr_matrix:
    """b(u) = sum_p conj(c_p) b_p on a variable-number sector."""
    out = sp.csr_matrix((sector.dim, sector.dim), dtype=complex)
    for j, cj in enumerate(c):
        if cj:
            out = out + np.conj(cj) * sector.string([(j, False)])
    return out.tocsr()


def _gamma_q(sector: Sector, b: sp.csr_matrix, v: np.ndarray) -> np.ndarray:
    """Gamma(q_u) v = sum_j (-1)^j b^*(u)^j b(u)^j v / j!."""
    out = v.copy()
    bd = b.conj().T.tocsr()
    term = v.copy()
    fact = 1.0
    for j in range(1, sector.cap + 1):
        term = b @ term
        fact *= j
        w = term
        for _ in range(j):
            w = bd @ w
        out = out + ((-1) ** j / fact) * w
    return out


def _exc_particle_sector(space: FockSpace) -> Sector:
    return Sector(space.m_b, "total", space.N)


def excitation_map(space: FockSpace, psi: np.ndarray, u: np.ndarray, alpha: np.ndarray):
    """X_{u,alpha} psi on the excitation space F_{perp u}^{<=N} (x) F; returns (exc_space, chi)."""
    N, modes = space.N, space.modes
    c = modes.restrict_u(u)
    ex_p = _exc_particle_sector(space)
    ex = FockSpace(ex_p, space.field, modes)
    phi = _shifted(space, psi, np.sqrt(N) * modes.restrict_alpha(alpha))
    idx = _embed(space.particles, ex_p)
    Phi = np.zeros((ex_p.dim, space.field.dim), dtype=complex)
    Phi[idx] = phi.reshape(space.particles.dim, space.field.dim)
    b = _b_of(ex_p, c)
    chi = np.zeros_like(Phi)
    cur = Phi
    for k in range(N, -1, -1):
        # cur = b(u)^{N-k} Phi / sqrt((N-k)!) lives in the k-particle sector
        part = cur * (ex_p.totals == k)[:, None]
        chi += _gamma_q(ex_p, b, part)
        if k:
            cur = (b @ cur) / np.sqrt(N - k + 1)
    return ex, chi.reshape(-1)


def excitation_adjoint(space: FockSpace, chi: np.ndarray, u: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """X^* chi = W(sqrt(N) alpha) sum_k b^*(u)^{N-k}/sqrt((N-k)!) chi^{(k)} on the fixed-N space."""
    N, modes = space.N, space.modes
    c = modes.restrict_u(u)
    ex_p = _exc_particle_sector(space)
    C = chi.reshape(ex_p.dim, space.field.dim)
    bd = _b_of(ex_p, c).conj().T.tocsr()
    out = np.zeros_like(C)
    for k in range(N + 1):
        v = C * (ex_p.totals == k)[:, None]
        for j in range(N - k):
            v = (bd @ v) / np.sqrt(j + 1)
        out += v
    idx = _embed(space.particles, ex_p)
    psi = out[idx].reshape(-1)
    Wf = weyl_field_block(space, np.sqrt(N) * modes.restrict_alpha(alpha))
    return _field_apply(space, Wf, psi)


# ---------------------------------------------------------------------------
# quadratic generators in second quantization


class QuadraticFock:
    """Fock realization of c^* A c + 1/2 (c^* B c^*T + h.c.) + c0 on a variable-number space.

    Modes c are the particle-sector modes followed by the field-sector modes.
    """

    def __init__(self, space: FockSpace):
        if space.particles.rule == "fixed" and space.m_b:
            raise ValueError("quadratic generators need a variable particle number")
        self.space = space
        P, F = space.particles, space.field
        self.bp = [P.string([(i, False)]) for i in range(P.m)]
        self.bd = [x.conj().T.tocsr() for x in self.bp]
        self.af = [F.string([(i, False)]) for i in range(F.m)]
        self.ad = [x.conj().T.tocsr() for x in self.af]
        self.Ip = sp.identity(P.dim, dtype=complex, format="csr")
        self.If = sp.identity(F.dim, dtype=complex, format="csr")
        self.n = P.m + F.m

    def _sector_one(self, S: Sector, dn, up, A, B):
        """c^* A c + 1/2 (c^* B c^* + h.c.) within one sector."""
        out = sp.csr_matrix((S.dim, S.dim), dtype=complex)
        m = len(dn)
        for i in range(m):
            for j in range(m):
                if A[i, j]:
                    out = out + A[i, j] * (up[i] @ dn[j])
                if B[i, j]:
                    X = (0.5 * B[i, j]) * (up[i] @ up[j])
                    out = out + X + X.conj().T
        return out

    def _parts(self, gen: QuadraticGenerator):
        nb = self.space.m_b
        if gen.A.shape != (self.n, self.n) or gen.B.shape != (self.n, self.n):
            raise ValueError(f"generator of size {gen.A.shape} does not match {self.n} Fock modes")
        A, B = gen.A, gen.B
        Hp = self._sector_one(self.space.particles, self.bp, self.bd, A[:nb, :nb], B[:nb, :nb])
        Hf = self._sector_one(self.space.field, self.af, self.ad, A[nb:, nb:], B[nb:, nb:])
        # mixed terms: b_i^* (sum_k A_ik a_k) + h.c. and b_i^* (sum_k B_ik a_k^*) + h.c.
        mix = []
        for i in range(nb):
            Ma = sum((A[i, nb + k] * self.af[k] for k in range(len(self.af)) if A[i, nb + k]),
                     sp.csr_matrix((self.space.field.dim,) * 2, dtype=complex))
            Mb = sum((B[i, nb + k] * self.ad[k] for k in range(len(self.ad)) if B[i, nb + k]),
                     sp.csr_matrix((self.space.field.dim,) * 2, dtype=complex))
            M = (Ma + Mb).tocsr()
            if M.nnz:
                mix.append((i, M))
        return Hp.tocsr(), Hf.tocsr(), mix

    def matrix(self, gen: QuadraticGenerator) -> sp.csr_matrix:
        Hp, Hf, mix = self._parts(gen)
        H = sp.kron(Hp, self.If) + sp.kron(self.Ip, Hf)
        for i, M in mix:
            X = sp.kron(self.bd[i], M)
            H = H + X + X.conj().T
        if gen.c0:
            H = H + gen.c0 * sp.identity(self.space.dim, dtype=complex)
        return H.tocsr()

    def applier(self, gen: QuadraticGenerator):
        """Matrix-free action psi -> H psi (cheaper than assembling the kron products)."""
        Hp, Hf, mix = self._parts(gen)
        Dp, Df = self.space.particles.dim, self.space.field.dim
        mixh = [(i, M, M.conj().T.tocsr()) for i, M in mix]
        c0 = gen.c0

        def apply(psi):
            X = psi.reshape(Dp, Df)
            out = Hp @ X + (Hf @ X.T).T
            for i, M, Mh in mixh:
                out = out + self.bd[i] @ (M @ X.T).T + self.bp[i] @ (Mh @ X.T).T
            if c0:
                out = out + c0 * X
            return out.reshape(-1)

        return apply


def quad_fock_operator(space: FockSpace, gen: QuadraticGenerator) -> ManyBodyOperator:
    H = QuadraticFock(space).matrix(gen)
    op = ManyBodyOperator(H, gen.label or "quadratic", {"c0": gen.c0})
    op.check_hermitian()
    return op


def heisenberg_defect(space: FockSpace, gen: QuadraticGenerator, psi: np.ndarray, t: float,
                      U: np.ndarray, V: np.ndarray) -> float:
    """max_i |<psi(t), c_i psi(t)> - sum_j (U_ij <c_j> - V_ij <c_j^*>)| with psi(t) = e^{-itH} psi.

    (U, V) is the Bogoliubov matrix of the generator at time t, so the Heisenberg
    annihilators evolve as c(t) = U c - V c^*.
    """
    qf = QuadraticFock(space)
    H = qf.matrix(gen)
    pt = propagate(space, H, psi, t, method="dense" if space.dim <= 4000 else "krylov")
    lows = [space.kron(b, None) for b in qf.bp] + [space.kron(None, a) for a in qf.af]
    c0 = np.array([_expect(c, psi) for c in lows])
    ct = np.array([_expect(c, pt) for c in lows])
    pred = U @ c0 - V @ c0.conj()
    return float(np.max(np.abs(ct - pred)))


# ---------------------------------------------------------------------------
# time-dependent quadratic flows along mean-field trajectories


def _rk4_vec(apply1, apply2, apply3, apply4, psi, h):
    k1 = -1j * apply1(psi)
    k2 = -1j * apply2(psi + 0.5 * h * k1)
    k3 = -1j * apply3(psi + 0.5 * h * k2)
    k4 = -1j * apply4(psi + h * k3)
    return psi + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _restrict(gen: QuadraticGenerator, S: np.ndarray, label: str = "") -> tuple[QuadraticGenerator, float]:
    """Generator restricted to the isometry S and the leak out of its range."""
    A = S.conj().T @ gen.A @ S
    B = S.conj().T @ gen.B @ S.conj()
    leak = max(np.linalg.norm(gen.A @ S - S @ A), np.linalg.norm(gen.B @ S.conj() - S @ B))
    return QuadraticGenerator(A, B, 0.0, label or gen.label), float(leak)


def _mf_stages(ks: KernelSet, state: MeanFieldState, theta: float, t: float, n: int):
    """Yield the four RK4 stage states of the theta-flow for each of n steps."""
    h = t / n
    y = (state.u, state.alpha)
    rhs = lambda u, a: theta_rhs(ks, u, a, theta)
    for _ in range(n):
        k1 = rhs(*y)
        y2 = (y[0] + h / 2 * k1[0], y[1] + h / 2 * k1[1])
        k2 = rhs(*y2)
        y3 = (y[0] + h / 2 * k2[0], y[1] + h / 2 * k2[1])
        k3 = rhs(*y3)
        y4 = (y[0] + h * k3[0], y[1] + h * k3[1])
        k4 = rhs(*y4)
        yield y, y2, y3, y4
        y = (y[0] + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
             y[1] + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))
    yield y, None, None, None


class _Restricted:
    """Quadratic generators on a ModeSpace, restricted by S and realized on a Fock space."""

    def __init__(self, qf: QuadraticFock, S: np.ndarray, leak_tol: float = 1e-9):
        self.qf, self.S, self.leak_tol = qf, S, leak_tol
        self.max_leak = 0.0

    def __call__(self, gen: QuadraticGenerator):
        g, leak = _restrict(gen, self.S)
        self.max_leak = max(self.max_leak, leak)
        if leak > self.leak_tol:
            raise ValueError(f"generator leaks out of the Fock modes ({leak:.3e})")
        return self.qf.applier(g)


def _evolve_H(ms: ModeSpace, ks_mf: KernelSet, ks_L: KernelSet, state: MeanFieldState, theta: float,
              t: float, dt: float, R: _Restricted, psi: np.ndarray):
    n = max(int(round(abs(t) / dt)), 1)
    h = t / n
    cache = _HCache(ms, ks_mf, ks_L, theta)
    app = lambda y: R(assemble_H_bog(ms, ks_mf, ks_L, MeanFieldState(*y), theta, cache, check=False))
    end = None
    for y, y2, y3, y4 in _mf_stages(ks_mf, state, theta, t, n):
        if y2 is None:
            end = MeanFieldState(y[0], y[1], state.t + t)
            break
        psi = _rk4_vec(app(y), app(y2), app(y3), app(y4), psi, h)
    return psi, end


def _evolve_D(ms: ModeSpace, ks_mf: KernelSet, ks_L: KernelSet, base: MeanFieldState, theta: float,
              dtheta: float, R: _Restricted, psi: np.ndarray, reverse: bool = False):
    n = max(int(round(abs(theta) / dtheta)), 1)
    h = theta / n
    app = lambda s: R(assemble_D_bog(ms, ks_mf, ks_L, base, s, dressing_flow_closed(ks_mf, base, s)))
    sgn, s0 = (-1.0, theta) if reverse else (1.0, 0.0)
    hs = sgn * h
    nxt = app(s0)
    for step in range(n):
        s = s0 + step * hs
        a1, am, nxt = nxt, app(s + hs / 2), app(s + hs)
        psi = _rk4_vec(a1, am, am, nxt, psi, hs)
    return psi


@dataclass
class PhaseReport:
    defect: float
    overlap: complex
    E: float
    theta: float
    cutoff: float
    t: float
    n_max: int
    saturation: float
    leak: float


def minimal_phase_instance(M: int = 8, L: float = 2 * np.pi, k0: int = 1):
    """Constant condensate, vanishing field: momentum sectors decouple; returns the sector for +-k0."""
    grid = make_grid(1, L, M)
    u = np.full(grid.shape, 1 / np.sqrt(L), dtype=complex)
    state = MeanFieldState(u, np.zeros(grid.shape, dtype=complex))
    return grid, state, k0


def _sector_isometry(ms: ModeSpace, k_ints) -> np.ndarray:
    """Columns: particle plane waves at the given momenta, then field modes at the same momenta."""
    g = ms.grid
    S = np.zeros((ms.n, 2 * len(k_ints)), dtype=complex)
    kf = np.round(ms.kf[0] / g.dk).astype(int)
    for c, kk in enumerate(k_ints):
        S[: ms.n_b, c] = np.exp(1j * kk * g.dk * ms.xs[0]) / np.sqrt(g.size)
        S[ms.n_b + int(np.flatnonzero(kf == kk)[0]), len(k_ints) + c] = 1.0
    return S


def phase_defect(theta: float, t: float, n_max: int = 8, dt: float = 1e-3, dtheta: float = 1e-3,
                 include_phase: bool = True, M: int = 8, L: float = 2 * np.pi, k0: int = 1) -> PhaseReport:
    """|arg <U_0(t) e^{-itE} Omega, W_t^* U_theta(t) W_0 Omega>| on the +-k0 sector of the minimal instance.

    The cutoff is Lambda = k0 dk; E is the discrete (2 theta - theta^2) dk sum of G0 B0
    over the sector's field modes, the part of E^Lambda_theta carried by this sector.
    """
    grid, state, k0 = minimal_phase_instance(M, L, k0)
    cutoff = k0 * grid.dk
    ks_mf = make_kernels(grid)
    ks_L = make_kernels(grid, cutoff)
    ms = make_mode_space(grid, cutoff)
    ks_int = [-k0, k0]
    S = _sector_isometry(ms, ks_int)
    space = excitation_space(None, 2, 2, n_max, n_max, rule="each")
    R = _Restricted(QuadraticFock(space), S)
    vac = np.zeros(space.dim, dtype=complex)
    vac[0] = 1.0
    sel = np.isin(np.round(grid.k[0] / grid.dk).astype(int).reshape(-1), ks_int)
    E = discrete_pair_constant(ks_L, theta, np.flatnonzero(sel))
    lhs, end0 = _evolve_H(ms, ks_mf, ks_L, state, 0.0, t, dt, R, vac)
    if include_phase:
        lhs = lhs * np.exp(-1j * t * E)
    rhs = _evolve_D(ms, ks_mf, ks_L, state, theta, dtheta, R, vac)
    rhs, _ = _evolve_H(ms, ks_mf, ks_L, dressing_flow_closed(ks_mf, state, theta), theta, t, dt, R, rhs)
    rhs = _evolve_D(ms, ks_mf, ks_L, end0, theta, dtheta, R, rhs, reverse=True)
    ov = complex(np.vdot(lhs, rhs))
    sat = max(space.field_occupancy_at_cap(lhs), space.field_occupancy_at_cap(rhs))
    return PhaseReport(abs(float(np.angle(ov))), ov, E, theta, cutoff, t, n_max, sat, R.max_leak)


# ---------------------------------------------------------------------------
# norm approximation


@dataclass
class NormApproxReport:
    defect: float
    N: int
    t: float
    norm_exact: float
    norm_bog: float
    lost_weight: float  # weight of U(t) chi above N excitations, dropped by X_t^*


def tiny_instance(coupling: float = 1.0, alpha_amp: float = 0.1):
    """M=4, L=2pi grid: four particle plane waves, field modes k in {-1, 0, 1}."""
    grid = make_grid(1, 2 * np.pi, 4)
    x = grid.x[0]
    u = np.exp(0.6 * np.cos(x) + 0.3j * np.sin(x))
    u = u / np.sqrt(grid.dvx * np.sum(np.abs(u) ** 2))
    alpha = np.where(grid.nyquist, 0.0, alpha_amp * np.exp(-grid.k2 / 2) * (1 + 0.5j * grid.k[0])).astype(complex)
    ks = make_kernels(grid, None, coupling)
    return grid, ks, MeanFieldState(u.astype(complex), alpha)


def norm_approximation_defect(N: int, t: float, n_max: int = 4, coupling: float = 1.0,
                              dt: float = 2.5e-3, chi: np.ndarray | None = None,
                              alpha_amp: float = 0.1, exc_cap: int | None = None) -> NormApproxReport:
    """|| e^{-itH_N} X^* chi - X_t^* U(t) chi || on the tiny instance with chi = vacuum by default."""
    grid, ks, state = tiny_instance(coupling, alpha_amp)
    modes = plane_wave_modes(grid)
    space = build_space(N, modes, n_max)
    cap = max(N, 4) if exc_cap is None else exc_cap
    ex = excitation_space(modes, modes.m_b, modes.m_a, cap, n_max, rule="total")
    ms = make_mode_space(grid)
    S = np.zeros((ms.n, ms.n), dtype=complex)
    S[: ms.n_b, : ms.n_b] = modes.waves
    S[ms.n_b:, ms.n_b:] = np.eye(ms.n_a)
    R = _Restricted(QuadraticFock(ex), S)
    if chi is None:
        chi = np.zeros(ex.dim, dtype=complex)
        chi[0] = 1.0
    H = build_nelson_hamiltonian(space, coupling=coupling)
    chiN = _truncate_exc(space, ex, chi)
    psi0 = excitation_adjoint(space, chiN, state.u, state.alpha)
    psit = propagate(space, H, psi0, t)
    chit, end = _evolve_H(ms, ks, ks, state, 0.0, t, dt, R, chi.astype(complex))
    lost = float(np.sum(np.abs(chit.reshape(ex.particles.dim, -1)[ex.particles.totals > N]) ** 2))
    chitN = _truncate_exc(space, ex, chit)
    approx = excitation_adjoint(space, chitN, end.u / np.sqrt(grid.dvx * np.sum(np.abs(end.u) ** 2)), end.alpha)
    return NormApproxReport(float(np.linalg.norm(psit - approx)), N, t, float(np.linalg.norm(psit)),
                            float(np.linalg.norm(chit)), lost)


def _truncate_exc(space: FockSpace, ex: FockSpace, chi: np.ndarray) -> np.ndarray:
    """Restrict a vector on ex (particle total <= cap) to the excitation space of the fixed-N space."""
    target = _exc_particle_sector(space)
    C = chi.reshape(ex.particles.dim, ex.field.dim)
    idx = target.index(ex.particles.occ)
    out = np.zeros((target.dim, ex.field.dim), dtype=complex)
    keep = idx >= 0
    out[idx[keep]] = C[keep]
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# dressing conjugation


def conjugation_defect(n_max: int, N: int = 1, p_max: int | None = None, coupling: float = 1.0,
                       probe_p: int = 1, probe_n: int = 1, M: int = 64) -> float:
    """|| P (W^D H W^D* - H^D + <G, B>) P || with P onto |p| <= probe_p and field occupations <= probe_n.

    Field modes k = +-1 on an L = 2pi grid; particle momenta |p| <= p_max (default n_max)
    without wrapping, so only truncation at the mode edges limits the identity.
    """
    grid = make_grid(1, 2 * np.pi, M)
    p_max = n_max if p_max is None else p_max
    modes = plane_wave_modes(grid, p_max=p_max * grid.dk, cutoff=grid.dk, wrap=False)
    keep = np.flatnonzero(modes.field[:, 0] != 0)
    modes = ModeSet(grid, modes.particle, modes.field[keep], wrap=False)
    space = build_space(N, modes, n_max)
    H = build_nelson_hamiltonian(space, coupling=coupling).matrix.toarray()
    HD = build_dressed_hamiltonian(space, coupling=coupling).matrix.toarray()
    S = dressing_generator(space, coupling=coupling).toarray()
    W = expm(S / np.sqrt(N))
    G, B = _field_kernels(modes, None, coupling)
    E1 = grid.dvk * float(np.sum(G * B))
    D = W @ H @ W.conj().T - HD + E1 * np.eye(space.dim)
    occ = np.array([space.basis(i) for i in range(space.dim)])
    low_p = np.all((occ[:, : modes.m_b] == 0) | (np.abs(modes.particle[:, 0])[None, :] <= probe_p), axis=1)
    sel = np.flatnonzero(low_p & np.all(occ[:, modes.m_b:] <= probe_n, axis=1))
    return float(np.linalg.norm(D[np.ix_(sel, sel)], 2))


# ---------------------------------------------------------------------------
# mean-field convergence


@dataclass
class BetaReport:
    beta_particle: float
    beta_field: float
    N: int
    t: float
    K: float
    beta_initial: float
    energy_gap: float  # |<H_N>/N - E(u, alpha)|, diagnostic only
    saturation: float

    @property
    def beta(self) -> float:
        return self.beta_particle + self.beta_field


def beta_trend_point(N: int, t: float, n_max: int = 4, K: float | None = None, coupling: float = 1.0,
                     alpha_amp: float = 0.1, dt: float = 1e-3) -> BetaReport:
    """beta[e^{-itH_N} Psi_{N,K}, s[t](u, alpha)] on the tiny instance; K defaults to Lambda."""
    grid, ks, state = tiny_instance(coupling, alpha_amp)
    modes = plane_wave_modes(grid)
    K = ks.cutoff if K is None else K
    space = build_space(N, modes, n_max)
    H = build_nelson_hamiltonian(space, coupling=coupling)
    psi0 = dressed_initial_state(space, state.u, state.alpha, K, coupling=coupling).amp
    b0 = sum(beta_functional(space, psi0, state.u, state.alpha))
    gap = abs(float(np.vdot(psi0, H.matrix @ psi0).real) / N - energy(ks, state, 0.0))
    psit = propagate(space, H, psi0, t)
    st = evolve(ks, state, 0.0, t, dt)
    u = st.u / np.sqrt(grid.dvx * np.sum(np.abs(st.u) ** 2))
    bp, bf = beta_functional(space, psit, u, st.alpha)
    return BetaReport(bp, bf, N, t, K, b0, gap, space.field_occupancy_at_cap(psit))


# ---------------------------------------------------------------------------
# structural identities


def random_mode_state(modes: ModeSet, rng: np.random.Generator, alpha_scale: float = 0.2):
    """Grid arrays (u, alpha) with random complex mode coefficients; u normalized."""
    g = modes.grid
    c = rng.standard_normal(modes.m_b) + 1j * rng.standard_normal(modes.m_b)
    c /= np.linalg.norm(c)
    u = (modes.waves @ c / np.sqrt(g.dvx)).reshape(g.shape)
    a = np.zeros(g.size, dtype=complex)
    a[modes.field_index()] = alpha_scale * (rng.standard_normal(modes.m_a) + 1j * rng.standard_normal(modes.m_a))
    a /= np.sqrt(g.dvk)
    return u, a.reshape(g.shape)


def random_vector(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def project_excitations(ex: FockSpace, chi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Gamma(q_u) chi: removes every excitation along u."""
    c = ex.modes.restrict_u(u)
    C = chi.reshape(ex.particles.dim, ex.field.dim)
    return _gamma_q(ex.particles, _b_of(ex.particles, c), C).reshape(-1)


def _perp(c: np.ndarray, v: np.ndarray) -> np.ndarray:
    w = v - c * np.vdot(c, v)
    return w / np.linalg.norm(w)


def round_trip_defect(space: FockSpace, psi: np.ndarray, u: np.ndarray, alpha: np.ndarray) -> float:
    """|| X^* X psi - psi ||."""
    _, chi = excitation_map(space, psi, u, alpha)
    return float(np.linalg.norm(excitation_adjoint(space, chi, u, alpha) - psi))


def excitation_relation_defects(space: FockSpace, chi: np.ndarray, u: np.ndarray, alpha: np.ndarray,
                                rng: np.random.Generator) -> dict[str, float]:
    """Defects of the four particle relations X O X^* = R on chi, with f, g random and orthogonal to u."""
    N, modes = space.N, space.modes
    c = modes.restrict_u(u)
    f = _perp(c, random_vector(modes.m_b, rng))
    gv = _perp(c, random_vector(modes.m_b, rng))
    ex_p = _exc_particle_sector(space)
    fd = space.field.dim
    root = np.sqrt(np.maximum(N - ex_p.totals, 0.0))
    bf_ex_dag = _b_of(ex_p, f).conj().T.tocsr()
    bg_ex = _b_of(ex_p, gv)
    bf_ex = _b_of(ex_p, f)

    def right(fn):
        C = chi.reshape(ex_p.dim, fd)
        return fn(C).reshape(-1)

    P = space.particles
    cases = {
        "b*(u)b(u)": (np.outer(c, c.conj()), lambda C: (N - ex_p.totals)[:, None].clip(0) * C),
        "b*(f)b(u)": (np.outer(f, c.conj()), lambda C: bf_ex_dag @ (root[:, None] * C)),
        "b*(u)b(f)": (np.outer(c, f.conj()), lambda C: root[:, None] * (bf_ex @ C)),
        "b*(f)b(g)": (np.outer(f, gv.conj()), lambda C: bf_ex_dag @ (bg_ex @ C)),
    }
    psi = excitation_adjoint(space, chi, u, alpha)
    out = {}
    for name, (T, fn) in cases.items():
        Op = space.kron(P.one_body(T), None)
        _, lhs = excitation_map(space, Op @ psi, u, alpha)
        out[name] = float(np.linalg.norm(lhs - right(fn)))
    return out


def weyl_relation_defects(space: FockSpace, f: np.ndarray, g: np.ndarray, probe: np.ndarray) -> dict[str, float]:
    """Inverse relation as an operator norm; composition and the shift of <a_k> on a field-sector probe.

    The inverse is exact up to rounding.  The other two are truncation-limited,
    so the probe should sit well below the occupation cap.
    """
    Wf = weyl_field_block(space, f)
    Wmf = weyl_field_block(space, -f)
    Wg = weyl_field_block(space, g)
    Wfg = weyl_field_block(space, f + g)
    I = np.eye(Wf.shape[0])
    a, _ = _ladders(space)
    probe = probe / np.linalg.norm(probe)
    phase = np.exp(-1j * np.imag(np.vdot(f, g)))
    shifted = Wf @ probe
    shift = max(abs(np.vdot(shifted, a[j] @ shifted) - np.vdot(probe, a[j] @ probe) - f[j])
                for j in range(len(f)))
    return {
        "inverse": float(np.linalg.norm(Wf @ Wmf - I, 2)),
        "composition": float(np.linalg.norm(Wf @ (Wg @ probe) - phase * (Wfg @ probe))),
        "shift": float(shift),
    }


def _trace_norm(A: np.ndarray) -> float:
    return float(np.sum(np.linalg.svd(A, compute_uv=False)))


def reduced_density_margins(space: FockSpace, psi: np.ndarray, u: np.ndarray, alpha: np.ndarray):
    """(bound - trace distance) for the particle and field inequalities; both must be >= 0.

    Particle: Tr|gamma10 - N|u><u|| <= N sqrt(8 <(q_u)_1>).
    Field: Tr|gamma01 - N|alpha><alpha|| <= 3 n + 6 ||alpha|| sqrt(n), n = ||N_a^{1/2} W^* psi||^2.
    The cross term of the field bound lacks a factor sqrt(N), so the bound
    holds only for N <= 9.
    """
    N, modes = space.N, space.modes
    c = modes.restrict_u(u)
    am = modes.restrict_alpha(alpha)
    g10, g01 = reduced_densities(space, psi)
    bp, bf = beta_functional(space, psi, u, alpha)
    lp = _trace_norm(g10 - N * np.outer(c, c.conj()))
    rp = N * np.sqrt(8 * max(bp, 0.0))
    n = N * bf
    lf = _trace_norm(g01 - N * np.outer(am, am.conj()))
    rf = 3 * n + 6 * np.linalg.norm(am) * np.sqrt(max(n, 0.0))
    return rp - lp, rf - lf
