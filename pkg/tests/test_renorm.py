import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nelsonlab import kernels as kn
from nelsonlab import renorm as rn
from nelsonlab.meanfield import gaussian_state
from nelsonlab.spectral import make_grid


class TestContinuum:
    """Radial quadrature of the pair constant."""

    def test_theta0(self):
        assert rn.pair_constant(100.0, 0.0) == 0

    def test_zero_cutoff(self):
        assert rn.pair_constant(0.0, 1.0) == 0

    def test_negative_cutoff(self):
        with pytest.raises(ValueError):
            rn.pair_constant(-1.0, 1.0)

    def test_doubling_difference(self):
        diff = rn.pair_constant(2e4, 1.0) - rn.pair_constant(1e4, 1.0)
        assert diff == pytest.approx(4 * math.pi * math.log(2), rel=1e-4)

    def test_d1_plateau(self):
        a, b = rn.pair_constant(1e3, 1.0, d=1), rn.pair_constant(1e4, 1.0, d=1)
        assert abs(b - a) < 2e-3 * abs(b)

    @given(st.floats(1.0, 1e3), st.floats(0, 1))
    def test_theta_factor(self, cutoff, th):
        assert rn.pair_constant(cutoff, th) == pytest.approx((2 * th - th**2) * rn.pair_constant(cutoff, 1.0),
                                                              rel=1e-12, abs=1e-300)

    def test_monotone(self):
        vals = [rn.pair_constant(c, 1.0) for c in np.geomspace(1, 1e4, 12)]
        assert np.all(np.diff(vals) > 0)

    def test_direct_quadrature(self):
        from scipy.integrate import quad
        f = lambda r: 4 * math.pi * r**2 / (math.sqrt(r * r + 1) * (r * r + math.sqrt(r * r + 1)))
        assert rn.pair_constant(5.0, 1.0) == pytest.approx(quad(f, 0, 5.0, epsabs=1e-13)[0], rel=1e-10)

    def test_e_k(self):
        assert rn.e_k_constant(50.0) == pytest.approx(rn.pair_constant(50.0, 1.0), rel=1e-14)

    def test_sphere_area(self):
        assert rn.sphere_area(1) == pytest.approx(2)
        assert rn.sphere_area(2) == pytest.approx(2 * math.pi)
        assert rn.sphere_area(3) == pytest.approx(4 * math.pi)


class TestFit:
    """Logarithmic fit."""

    def test_synthetic(self):
        c = np.geomspace(10, 1e4, 8)
        s, b, r = rn.log_divergence_fit(c, 3.0 * np.log(c) - 2.0)
        assert s == pytest.approx(3.0, rel=1e-12) and b == pytest.approx(-2.0, rel=1e-12) and r < 1e-12

    def test_too_few(self):
        with pytest.raises(ValueError):
            rn.log_divergence_fit([10, 100, 1000], [1, 2, 3])

    def test_short_span(self):
        with pytest.raises(ValueError):
            rn.log_divergence_fit([10, 20, 30, 40], [1, 2, 3, 4])

    def test_slope_near_4pi(self):
        c = np.geomspace(1e2, 1e4, 9)
        s, _, _ = rn.log_divergence_fit(c, [rn.pair_constant(x, 1.0) for x in c])
        assert abs(s - 4 * math.pi) / (4 * math.pi) < 0.02


class TestDiscrete:
    """Grid sums and the mean-field part."""

    def test_discrete_theta0(self, ks1):
        assert rn.discrete_pair_constant(ks1, 0.0) == 0

    def test_discrete_mode_subset(self, ks1):
        all_modes = np.arange(ks1.grid.size)
        assert rn.discrete_pair_constant(ks1, 0.5, all_modes) == pytest.approx(rn.discrete_pair_constant(ks1, 0.5))

    def test_discrete_vs_continuum_d1(self):
        g = make_grid(1, 64 * math.pi, 1024)
        ks = kn.make_kernels(g, 4.0)
        assert rn.discrete_pair_constant(ks, 1.0) == pytest.approx(rn.pair_constant(4.0, 1.0, d=1), rel=1e-3)

    def test_mf_theta0_zero_coupling(self, grid1):
        ks = kn.make_kernels(grid1, coupling=0.0)
        s = gaussian_state(grid1)
        assert rn.mf_constant(ks, s.u, 1.0) == 0

    def test_renorm_result(self, ks1, state1):
        r = rn.renorm_constant(4.0, 1.0, ks1, state1.u)
        assert r.E_total == pytest.approx(r.E_pair + r.E_mf)
        assert set(r.row()) == {"Lambda", "theta", "E_pair", "E_mf", "E_total", "quad_err"}
        assert rn.renorm_constant(4.0, 1.0).E_mf == 0
