import math

import numpy as np
import pytest
import scipy.sparse as sp

from nelsonlab import fock as fk
from nelsonlab.bogoliubov import QuadraticGenerator, expm_generator
from nelsonlab.spectral import make_grid


def _grid4():
    return make_grid(1, 2 * math.pi, 4)


def _modes(particle, field, M=4):
    g = make_grid(1, 2 * math.pi, M)
    return fk.ModeSet(g, np.array(particle).reshape(-1, 1), np.array(field).reshape(-1, 1))


@pytest.fixture(scope="module")
def tiny():
    grid, ks, state = fk.tiny_instance()
    modes = fk.plane_wave_modes(grid)
    return grid, ks, state, modes


class TestSpaces:
    """Sector sizes and the basis index."""

    def test_dimension_small(self):
        assert fk.build_space(2, _modes([0, 1], [1]), 2).dim == 9

    def test_particle_dimension(self):
        assert fk.Sector(4, "fixed", 3).dim == 20
        assert fk.Sector(3, "total", 2).dim == math.comb(5, 3)
        assert fk.Sector(2, "each", 3).dim == 16

    @pytest.mark.parametrize("rule", ["fixed", "total", "each"])
    def test_enumeration_size(self, rule):
        s = fk.Sector(3, rule, 3)
        assert s.occ.shape[0] == s.dim and len(np.unique(s.codes)) == s.dim

    def test_index_round_trip(self, tiny):
        space = fk.build_space(2, tiny[3], 2)
        assert all(space.index(space.basis(i)) == i for i in range(space.dim))

    def test_index_outside(self):
        space = fk.build_space(2, _modes([0, 1], [1]), 2)
        assert space.index((1, 0, 0)) == -1 and space.index((2, 0, 3)) == -1

    def test_dim_cap(self, tiny):
        with pytest.raises(fk.TruncationError):
            fk.build_space(8, tiny[3], 6, dim_cap=1000)

    def test_bad_rule(self):
        with pytest.raises(ValueError):
            fk.Sector(2, "bogus", 1)

    def test_ladder_commutator(self):
        s = fk.Sector(2, "each", 5)
        a = s.string([(0, False)]).toarray()
        comm = a @ a.conj().T - a.conj().T @ a
        keep = s.occ[:, 0] < 5
        np.testing.assert_allclose(np.diag(comm)[keep], 1.0, atol=1e-14)


class TestNelsonHamiltonian:
    """build_nelson_hamiltonian."""

    def test_zero_coupling_spectrum(self, tiny):
        grid, _, _, modes = tiny
        space = fk.build_space(2, modes, 2)
        H = fk.build_nelson_hamiltonian(space, coupling=0.0).matrix
        assert sp.linalg.norm(H - sp.diags(H.diagonal())) == 0
        occ = np.array([space.basis(i) for i in range(space.dim)])
        want = occ[:, : modes.m_b] @ np.sum(modes.p**2, axis=1) + occ[:, modes.m_b:] @ modes.omega
        np.testing.assert_allclose(H.diagonal().real, want, atol=1e-14)

    def test_hermitian(self, tiny):
        space = fk.build_space(3, tiny[3], 3)
        assert fk.build_nelson_hamiltonian(space).hermiticity_defect() <= 1e-12

    def test_hand_assembled(self):
        # N=1, particle momenta {0, 1}, one field mode k=1, n_max=4 on the L=2pi, M=4 grid
        modes = _modes([0, 1], [1])
        space = fk.build_space(1, modes, 4)
        H = fk.build_nelson_hamiltonian(space).matrix.toarray()
        w = math.sqrt(2.0)
        G = w**-0.5
        D = np.zeros((10, 10))
        idx = lambda p, n: p * 5 + n
        for p in (0, 1):
            for n in range(5):
                D[idx(p, n), idx(p, n)] = p * p + n * w
        for n in range(4):
            # e^{-ikx} a^* moves the particle from p=1 to p=0 and adds a quantum
            D[idx(0, n + 1), idx(1, n)] = D[idx(1, n), idx(0, n + 1)] = G * math.sqrt(n + 1)
        order = [space.index((1 - p, p, n)) for p in (0, 1) for n in range(5)]
        np.testing.assert_allclose(H[np.ix_(order, order)], D, atol=1e-14)
        assert np.linalg.eigvalsh(H)[0] == pytest.approx(np.linalg.eigvalsh(D)[0], abs=1e-13)

    def test_requires_fixed_n(self, tiny):
        ex = fk.excitation_space(tiny[3], 4, 3, 2, 2)
        with pytest.raises(ValueError):
            fk.build_nelson_hamiltonian(ex)


class TestDressedHamiltonian:
    """build_dressed_hamiltonian and the dressing conjugation."""

    def test_hermitian(self, tiny):
        space = fk.build_space(2, tiny[3], 3)
        assert fk.build_dressed_hamiltonian(space).hermiticity_defect() <= 1e-12

    def test_zero_coupling(self, tiny):
        space = fk.build_space(2, tiny[3], 2)
        a = fk.build_dressed_hamiltonian(space, coupling=0.0).matrix
        b = fk.build_nelson_hamiltonian(space, coupling=0.0).matrix
        assert sp.linalg.norm(a - b) == 0

    def test_conjugation_decreasing(self):
        d = [fk.conjugation_defect(n) for n in (3, 5, 7)]
        assert d[0] > d[1] > d[2]
        assert d[2] < 1e-2

    def test_dressing_generator_antihermitian(self, tiny):
        S = fk.dressing_generator(fk.build_space(2, tiny[3], 2))
        assert sp.linalg.norm(S + S.conj().T) == 0


class TestWeylAndStates:
    """Weyl operators, coherent product states and dressed initial states."""

    def test_weyl_zero(self, tiny):
        space = fk.build_space(1, tiny[3], 3)
        W = fk.weyl(space, np.zeros(space.m_a))
        assert sp.linalg.norm(W.matrix - sp.identity(space.dim)) == 0

    def test_weyl_relations(self):
        ex = fk.excitation_space(None, 1, 2, 1, 18, rule="each")
        f = np.array([0.15 + 0.05j, -0.1j])
        g = np.array([0.05, 0.1 + 0.1j])
        probe = np.zeros(ex.field.dim, dtype=complex)
        probe[0] = 1.0
        probe[ex.field.index([1, 0])[0]] = 0.5
        d = fk.weyl_relation_defects(ex, f, g, probe)
        assert d["inverse"] < 1e-10 and d["composition"] < 1e-9 and d["shift"] < 1e-9

    def test_coherent_vacuum_field(self, tiny):
        grid, _, state, modes = tiny
        space = fk.build_space(2, modes, 3)
        X = fk.coherent_product_state(space, state.u, 0 * state.alpha).as_matrix()
        assert np.all(X[:, 1:] == 0)

    def test_coherent_beta_and_number(self, tiny):
        grid, _, state, modes = tiny
        N = 3
        space = fk.build_space(N, modes, 6)
        psi = fk.coherent_product_state(space, state.u, state.alpha).amp
        bp, bf = fk.beta_functional(space, psi, state.u, state.alpha)
        assert abs(bp) < 1e-12 and abs(bf) < 1e-8
        na = space.kron(None, space.field.number(np.ones(space.m_a)))
        am = modes.restrict_alpha(state.alpha)
        assert np.vdot(psi, na @ psi).real == pytest.approx(N * np.sum(np.abs(am) ** 2), rel=1e-6)

    def test_dressed_state_no_dressing(self, tiny):
        grid, _, state, modes = tiny
        space = fk.build_space(2, modes, 3)
        a = fk.dressed_initial_state(space, state.u, state.alpha, K=5.0).amp
        b = fk.coherent_product_state(space, state.u, state.alpha).amp
        assert np.array_equal(a, b)

    def test_dressed_state_norm_and_trend(self, tiny):
        grid, _, state, modes = tiny
        N = 2
        space = fk.build_space(N, modes, 5)
        betas = []
        for K in (0.0, 0.5, 1.5):
            psi = fk.dressed_initial_state(space, state.u, state.alpha, K).amp
            assert abs(np.linalg.norm(psi) - 1) < 1e-6
            betas.append(sum(fk.beta_functional(space, psi, state.u, state.alpha)))
        assert betas[0] > betas[1] > betas[2]


class TestPropagation:
    """Krylov propagation against dense exponentials and conservation."""

    def test_dense_match(self, tiny):
        space = fk.build_space(2, tiny[3], 2)
        assert space.dim <= 500
        H = fk.build_nelson_hamiltonian(space)
        psi = fk.random_vector(space.dim, np.random.default_rng(0))
        a = fk.propagate(space, H, psi, 0.7)
        b = fk.propagate(space, H, psi, 0.7, method="dense")
        assert np.linalg.norm(a - b) < 1e-9

    def test_conservation(self, tiny):
        space = fk.build_space(2, tiny[3], 3)
        H = fk.build_nelson_hamiltonian(space)
        psi = fk.random_vector(space.dim, np.random.default_rng(1))
        e0 = np.vdot(psi, H @ psi).real
        out = fk.propagate(space, H, psi, 1.0)
        assert abs(np.linalg.norm(out) - 1) < 1e-10
        assert abs(np.vdot(out, H @ out).real - e0) <= 1e-9 * abs(e0)

    def test_zero_time_and_method(self, tiny):
        space = fk.build_space(1, tiny[3], 2)
        H = fk.build_nelson_hamiltonian(space)
        psi = fk.random_vector(space.dim, np.random.default_rng(2))
        assert np.array_equal(fk.propagate(space, H, psi, 0.0), psi)
        with pytest.raises(ValueError):
            fk.propagate(space, H, psi, 0.1, method="euler")


class TestFunctionals:
    """beta, gamma and reduced densities."""

    def test_beta_one_particle_moved(self, tiny):
        grid, _, state, modes = tiny
        N = 3
        space = fk.build_space(N, modes, 4)
        c = modes.restrict_u(state.u)
        v = np.array([1, -1, 1, -1], dtype=complex)
        v -= c * np.vdot(c, v)
        v /= np.linalg.norm(v)
        psi = fk.coherent_product_state(space, state.u, 0 * state.alpha).amp
        moved = space.kron(space.particles.one_body(np.outer(v, c.conj())), None) @ psi / math.sqrt(N)
        assert np.linalg.norm(moved) == pytest.approx(1, abs=1e-12)
        bp, bf = fk.beta_functional(space, moved, state.u, 0 * state.alpha)
        assert bp == pytest.approx(1 / N, abs=1e-12) and abs(bf) < 1e-14

    def test_beta_one_field_quantum(self, tiny):
        grid, _, state, modes = tiny
        N = 2
        space = fk.build_space(N, modes, 6)
        pp = fk._particle_product(space.particles, modes.restrict_u(state.u))
        one = np.zeros(space.field.dim, dtype=complex)
        one[space.field.index([0, 1, 0])[0]] = 1.0
        Wf = fk.weyl_field_block(space, math.sqrt(N) * modes.restrict_alpha(state.alpha))
        psi = np.kron(pp, Wf @ one)
        _, bf = fk.beta_functional(space, psi, state.u, state.alpha)
        assert bf == pytest.approx(1 / N, abs=1e-6)

    def test_gamma_plane_wave_product(self, tiny):
        grid, _, state, modes = tiny
        space = fk.build_space(2, modes, 6)
        u = np.exp(1j * grid.x[0]) / math.sqrt(grid.L)
        psi = fk.coherent_product_state(space, u, state.alpha).amp
        assert abs(fk.gamma_functional(space, psi, u, state.alpha)) < 1e-8

    def test_gamma_brute_force(self, tiny):
        grid, _, state, modes = tiny
        N = 2
        space = fk.build_space(N, modes, 3)
        rng = np.random.default_rng(3)
        psi = fk.random_vector(space.dim, rng)
        zero = 0 * state.alpha
        c = modes.restrict_u(state.u)
        # (q_u p^2 q_u) summed over particles, built from single ladder strings
        P = space.particles
        lower = fk.Sector(modes.m_b, "fixed", N - 1)
        b = [P.string([(j, False)], target=lower).toarray() for j in range(modes.m_b)]
        bu = sum(np.conj(c[j]) * b[j] for j in range(modes.m_b))
        qp = [b[j] - c[j] * bu for j in range(modes.m_b)]
        p2 = np.sum(modes.p**2, axis=1)
        T = sum(p2[j] * qp[j].conj().T @ qp[j] for j in range(modes.m_b))
        F = space.field.number(modes.omega).toarray()
        want = (np.vdot(psi, np.kron(T, np.eye(space.field.dim)) @ psi).real
                + np.vdot(psi, np.kron(np.eye(P.dim), F) @ psi).real) / N
        assert fk.gamma_functional(space, psi, state.u, zero) == pytest.approx(want, rel=1e-12)

    def test_gamma_nonnegative(self, tiny):
        grid, _, state, modes = tiny
        space = fk.build_space(2, modes, 3)
        rng = np.random.default_rng(4)
        for _ in range(5):
            u, a = fk.random_mode_state(modes, rng)
            assert fk.gamma_functional(space, fk.random_vector(space.dim, rng), u, a) >= 0

    def test_traces(self, tiny):
        grid, _, state, modes = tiny
        N = 2
        space = fk.build_space(N, modes, 3)
        psi = fk.random_vector(space.dim, np.random.default_rng(5))
        g10, g01 = fk.reduced_densities(space, psi)
        na = space.kron(None, space.field.number(np.ones(space.m_a)))
        assert np.trace(g10).real == pytest.approx(N, rel=1e-12)
        assert np.trace(g01).real == pytest.approx(np.vdot(psi, na @ psi).real, rel=1e-12)
        np.testing.assert_allclose(g10, g10.conj().T, atol=1e-13)

    def test_product_density(self, tiny):
        grid, _, state, modes = tiny
        N = 3
        space = fk.build_space(N, modes, 4)
        psi = fk.coherent_product_state(space, state.u, state.alpha).amp
        g10, _ = fk.reduced_densities(space, psi)
        c = modes.restrict_u(state.u)
        np.testing.assert_allclose(g10, N * np.outer(c, c.conj()) * np.linalg.norm(psi) ** 2, atol=1e-12)

    def test_density_convention(self, tiny):
        # gamma10[i, j] = <b_j^* b_i>
        grid, _, _, modes = tiny
        space = fk.build_space(1, modes, 1)
        psi = np.zeros(space.dim, dtype=complex)
        psi[space.index((1, 0, 0, 0, 0, 0, 0))] = 1 / math.sqrt(2)
        psi[space.index((0, 1, 0, 0, 0, 0, 0))] = 1j / math.sqrt(2)
        g10, _ = fk.reduced_densities(space, psi)
        assert g10[1, 0] == pytest.approx(0.5j)

    @pytest.mark.parametrize("N", [2, 4])
    def test_reduced_density_bounds(self, tiny, N):
        grid, _, _, modes = tiny
        space = fk.build_space(N, modes, 3)
        rng = np.random.default_rng(N)
        for _ in range(4):
            u, a = fk.random_mode_state(modes, rng)
            mp, mf_ = fk.reduced_density_margins(space, fk.random_vector(space.dim, rng), u, a)
            assert mp >= -1e-10 and mf_ >= -1e-10


class TestExcitationMap:
    """X_{u,alpha}, its adjoint and the particle relations."""

    def test_product_to_vacuum(self, tiny):
        grid, _, state, modes = tiny
        space = fk.build_space(3, modes, 8)
        psi = fk.coherent_product_state(space, state.u, state.alpha).amp
        _, chi = fk.excitation_map(space, psi, state.u, state.alpha)
        assert abs(chi[0]) == pytest.approx(1, abs=1e-7)
        assert np.linalg.norm(chi[1:]) < 1e-6

    def test_round_trip(self, tiny):
        grid, _, _, modes = tiny
        space = fk.build_space(3, modes, 3)
        rng = np.random.default_rng(6)
        u, a = fk.random_mode_state(modes, rng)
        assert fk.round_trip_defect(space, fk.random_vector(space.dim, rng), u, a) < 1e-10

    def test_relations(self, tiny):
        grid, _, _, modes = tiny
        space = fk.build_space(3, modes, 3)
        rng = np.random.default_rng(7)
        u, a = fk.random_mode_state(modes, rng)
        ex, chi = fk.excitation_map(space, fk.random_vector(space.dim, rng), u, a)
        chi = fk.project_excitations(ex, chi, u)
        d = fk.excitation_relation_defects(space, chi, u, a, rng)
        assert max(d.values()) < 1e-10

    def test_number_relation_expectation(self, tiny):
        grid, _, _, modes = tiny
        N = 3
        space = fk.build_space(N, modes, 3)
        rng = np.random.default_rng(8)
        u, a = fk.random_mode_state(modes, rng)
        ex, chi = fk.excitation_map(space, fk.random_vector(space.dim, rng), u, a)
        c = modes.restrict_u(u)
        psi = fk.excitation_adjoint(space, chi, u, a)
        op = space.kron(space.particles.one_body(np.outer(c, c.conj())), None)
        nb = np.repeat(ex.particles.totals, ex.field.dim)
        assert np.vdot(psi, op @ psi).real == pytest.approx(np.sum(np.clip(N - nb, 0, None) * np.abs(chi) ** 2),
                                                            rel=1e-10)


class TestQuadratic:
    """Second-quantized quadratic generators."""

    def test_diagonal(self):
        ex = fk.excitation_space(None, 2, 1, 3, 3, rule="each")
        w = np.array([0.5, 1.5, 2.0])
        H = fk.quad_fock_operator(ex, QuadraticGenerator(np.diag(w).astype(complex), np.zeros((3, 3))))
        occ = np.array([ex.basis(i) for i in range(ex.dim)])
        np.testing.assert_allclose(H.matrix.toarray(), np.diag(occ @ w), atol=1e-14)

    def test_hermitian(self, rng):
        ex = fk.excitation_space(None, 2, 1, 3, 3, rule="total")
        X = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        Y = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        H = fk.quad_fock_operator(ex, QuadraticGenerator(X + X.conj().T, Y + Y.T))
        assert H.hermiticity_defect() <= 1e-12

    def test_fixed_rejected(self, tiny):
        with pytest.raises(ValueError):
            fk.QuadraticFock(fk.build_space(2, tiny[3], 2))

    def test_heisenberg_convention(self, rng):
        ex = fk.excitation_space(None, 1, 1, 14, 14, rule="each")
        gen = QuadraticGenerator(np.array([[1.0, 0.3], [0.3, 1.4]], dtype=complex),
                                 np.array([[0.2, 0.1j], [0.1j, -0.15]]))
        c = rng.standard_normal(ex.dim) * np.exp(-1.5 * np.sum(np.array([ex.basis(i) for i in range(ex.dim)]), 1))
        psi = (c / np.linalg.norm(c)).astype(complex)
        t = 0.05
        W = expm_generator(gen, t)
        good = fk.heisenberg_defect(ex, gen, psi, t, W.U, W.V)
        bad = fk.heisenberg_defect(ex, gen, psi, t, W.U, -W.V)
        assert good < 1e-8 and bad > 1e-3


class TestOracleScenarios:
    """Phase and norm-approximation oracles at reduced size."""

    def test_phase_theta0(self):
        assert fk.phase_defect(0.0, 0.1, n_max=4, dt=5e-3).defect == 0

    def test_phase_decreasing(self):
        d = [fk.phase_defect(1.0, 0.1, n_max=n, dt=5e-3, dtheta=5e-3).defect for n in (2, 4, 6)]
        assert d[0] > d[1] > d[2]

    def test_norm_t0(self):
        assert fk.norm_approximation_defect(2, 0.0, n_max=3).defect < 1e-12

    def test_norm_zero_coupling(self):
        assert fk.norm_approximation_defect(2, 0.3, n_max=3, coupling=0.0).defect <= 1e-9
