import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nelsonlab import kernels as kn
from nelsonlab import meanfield as mf
from nelsonlab.spectral import fft_forward, inner_product, make_grid


def _small():
    g = make_grid(1, 4 * math.pi, 32)
    return g, kn.make_kernels(g)


class TestRightHandSide:
    """theta_rhs structure."""

    def test_bad_theta(self, ks1, state1):
        with pytest.raises(ValueError):
            mf.theta_rhs(ks1, state1.u, state1.alpha, 1.5)

    @pytest.mark.parametrize("th", [0.0, 0.5, 1.0])
    def test_norm_preserving_direction(self, ks1, state1, th):
        du, _ = mf.theta_rhs(ks1, state1.u, state1.alpha, th)
        assert abs(inner_product(ks1.grid, state1.u, du).real) < 1e-12

    def test_theta0_is_skg(self, ks1, state1):
        g, u, a = ks1.grid, state1.u, state1.alpha
        du, da = mf.theta_rhs(ks1, u, a, 0.0)
        from nelsonlab.spectral import laplacian
        phi = kn.phi_alpha(ks1, a)
        m = 0.5 * g.dvx * np.sum(phi * np.abs(u) ** 2)
        np.testing.assert_allclose(du, -1j * (-laplacian(g, u) + phi * u - m * u), atol=1e-11)
        want = -1j * (ks1.omega * a + ks1.G * kn.rho_hat(ks1, u))
        np.testing.assert_allclose(da, np.where(g.nyquist, 0, want), atol=1e-12)

    def test_nyquist_field_untouched(self, ks1, state1):
        _, da = mf.theta_rhs(ks1, state1.u, state1.alpha, 1.0)
        assert np.all(da[ks1.grid.nyquist] == 0)


class TestEvolution:
    """Fixed-step RK4 flows."""

    def test_zero_coupling_exact(self, grid1, state1):
        ks = kn.make_kernels(grid1, coupling=0.0)
        t = 0.3
        out = mf.evolve(ks, state1, 0.0, t, 1e-3)
        uh = fft_forward(grid1, state1.u) * np.exp(-1j * grid1.k2 * t)
        from nelsonlab.spectral import fft_inverse
        np.testing.assert_allclose(out.u, fft_inverse(grid1, uh), atol=1e-10)
        np.testing.assert_allclose(out.alpha, state1.alpha * np.exp(-1j * ks.omega * t), atol=1e-10)

    def test_plane_wave_energy(self, ks1, grid1):
        k0 = 3 * grid1.dk
        u = np.exp(1j * k0 * grid1.x[0]) / math.sqrt(grid1.L)
        s = mf.MeanFieldState(u.astype(complex), np.zeros(grid1.shape, dtype=complex))
        assert mf.energy(ks1, s, 0.0) == pytest.approx(k0**2, rel=1e-12)

    def test_group_law(self):
        g, ks = _small()
        s = mf.random_state(g, np.random.default_rng(1))
        a = mf.evolve(ks, mf.evolve(ks, s, 1.0, 0.1, 1e-3), 1.0, 0.15, 1e-3)
        b = mf.evolve(ks, s, 1.0, 0.25, 1e-3)
        assert mf.state_distance(g, a, b) < 1e-10

    def test_time_reversal(self):
        g, ks = _small()
        s = mf.random_state(g, np.random.default_rng(2))
        back = mf.evolve(ks, mf.evolve(ks, s, 0.5, 0.2, 1e-3), 0.5, -0.2, 1e-3)
        assert mf.state_distance(g, back, s) < 1e-10

    def test_integrate_diagnostics(self, ks1, state1):
        tr = mf.integrate(ks1, state1, mf.FlowSpec(theta=1.0, dt=1e-3, t_final=0.05, stride=10))
        assert len(tr.times) == 6 and tr.times[-1] == pytest.approx(0.05)
        assert max(abs(n - 1) for n in tr.norm_u) < 1e-12
        assert np.ptp(tr.energy_theta) < 1e-9
        assert len(list(tr.rows())) == 6

    def test_flowspec_validation(self):
        with pytest.raises(ValueError):
            mf.FlowSpec(dt=0)
        with pytest.raises(ValueError):
            mf.FlowSpec(theta=-0.1)

    def test_blowup_guard(self, ks1, state1):
        bad = state1.copy()
        bad.u[:] = np.nan
        with pytest.raises(FloatingPointError):
            mf.evolve(ks1, bad, 0.0, 0.01, 1e-3)


class TestDressingFlow:
    """Closed form against the ODE and basic identities."""

    def test_theta_zero(self, ks1, state1):
        out = mf.dressing_flow_closed(ks1, state1, 0.0)
        assert np.array_equal(out.u, state1.u) and np.array_equal(out.alpha, state1.alpha)

    def test_modulus_preserved(self, ks1, state1):
        out = mf.dressing_flow_closed(ks1, state1, 1.0)
        assert np.max(np.abs(np.abs(out.u) - np.abs(state1.u))) < 1e-14

    def test_tau_invariant_along_flow(self, ks1, state1):
        mid = mf.dressing_flow_closed(ks1, state1, 0.6)
        np.testing.assert_allclose(kn.tau(ks1, mid.u, mid.alpha), kn.tau(ks1, state1.u, state1.alpha), atol=1e-12)

    @settings(max_examples=5)
    @given(st.integers(0, 2**31), st.floats(0.1, 1.0))
    def test_closed_vs_ode(self, seed, th):
        g, ks = _small()
        s = mf.random_state(g, np.random.default_rng(seed))
        d = mf.state_distance(g, mf.dressing_flow_closed(ks, s, th), mf.dressing_flow_ode(ks, s, th, 1e-2))
        assert d < 1e-9

    def test_commuting_defect_at_zero_time(self, ks1, state1):
        assert mf.commuting_diagram_defect(ks1, state1, 0.0, 1e-3) == 0

    @given(st.integers(0, 2**31), st.floats(0, 1))
    def test_energy_pullback(self, seed, th):
        # needs k_max well above the state's envelope, otherwise aliasing shows at 1e-8
        g = make_grid(1, 8 * math.pi, 128)
        ks = kn.make_kernels(g)
        s = mf.random_state(g, np.random.default_rng(seed))
        e0 = mf.energy(ks, s, 0.0)
        e1 = mf.energy(ks, mf.dressing_flow_closed(ks, s, th), th)
        assert e1 == pytest.approx(e0, rel=1e-10)
