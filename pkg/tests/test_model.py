import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kglattice import model


class TestEvalPotential:
    def test_zero_potential_is_one(self, zero_potential):
        for theta in (0.0, 0.3, 0.77):
            assert model.eval_potential(zero_potential, theta) == 1.0

    def test_cosine_at_zero(self):
        P = model.QuasiPeriodicPotential({1: 1e-3}, radius_r=0.01)
        assert model.eval_potential(P, 0.0) == pytest.approx(1.002, abs=1e-15)

    def test_two_mode_matches_term_sum(self):
        eps = 1e-3
        P = model.QuasiPeriodicPotential({1: eps, 2: eps / 2}, radius_r=0.01)
        theta = 0.25
        # independent term-by-term summation over the full coefficient table
        expect = 1.0
        for k, p in P.coeffs.items():
            expect += p * math.cos(2 * math.pi * k[0] * theta)  # imag parts cancel
        assert model.eval_potential(P, theta) == pytest.approx(expect, abs=1e-15)
        # mode 1: 2 eps cos(pi/2) = 0; mode 2: eps cos(pi) = -eps
        assert model.eval_potential(P, theta) == pytest.approx(1.0 - eps, abs=1e-12)

    def test_dimension_mismatch(self):
        P = model.QuasiPeriodicPotential({(1, 0): 1e-3}, radius_r=0.01, d=2)
        with pytest.raises(ValueError):
            model.eval_potential(P, (0.1, 0.2, 0.3))

    def test_evaluation_real_on_random_sample(self, rng):
        P = model.QuasiPeriodicPotential({1: 2e-3, 3: 1e-4}, radius_r=0.01)
        thetas = rng.uniform(0, 1, size=1000)
        values = 1.0 + model.eval_series(P, thetas)
        assert values.dtype.kind == "f"  # real arithmetic path, |Im| = 0 exactly

    def test_positivity_when_small(self, rng):
        P = model.cosine_potential(0.3)
        eps0 = model.strip_norm(P)
        thetas = rng.uniform(0, 1, size=1000)
        assert np.all(1.0 + model.eval_series(P, thetas) >= 1.0 - eps0)


class TestStripNorm:
    def test_zero(self, zero_potential):
        assert model.strip_norm(zero_potential) == 0.0

    def test_single_mode_small_radius(self):
        eps = 1e-3
        r = 1e-9
        P = model.QuasiPeriodicPotential({1: eps / 2}, radius_r=r)
        assert model.strip_norm(P) == pytest.approx(eps, rel=1e-7)

    def test_formula_value(self):
        P = model.QuasiPeriodicPotential({1: 5e-4}, radius_r=0.1)
        expect = 2 * 5e-4 * math.exp(2 * math.pi * 0.1)
        assert expect == pytest.approx(1.8744560875853385e-3, rel=1e-12)
        assert model.strip_norm(P) == pytest.approx(expect, rel=1e-14)

    def test_cosine_potential_calibration(self):
        for eps in (1e-3, 1e-5):
            assert model.strip_norm(model.cosine_potential(eps)) == pytest.approx(eps, rel=1e-12)

    @given(st.floats(min_value=0.01, max_value=0.2), st.floats(min_value=0.21, max_value=0.5))
    @settings(max_examples=25, deadline=None)
    def test_monotone_in_radius(self, r1, r2):
        p1 = model.QuasiPeriodicPotential({1: 1e-3, 2: 5e-4}, radius_r=r1)
        p2 = model.QuasiPeriodicPotential({1: 1e-3, 2: 5e-4}, radius_r=r2)
        assert model.strip_norm(p1) <= model.strip_norm(p2)

    def test_reality_symmetry_enforced(self):
        with pytest.raises(ValueError):
            model.QuasiPeriodicPotential({1: 1e-3, -1: 2e-3}, radius_r=0.01)


class TestDiophantine:
    def test_rational_fails(self):
        omega = model.FrequencyVector((0.5,), gamma=0.1, tau=2.0)
        rep = model.check_diophantine(omega, 4)
        assert not rep.passed
        assert rep.worst_n == (2,)
        assert rep.worst_distance == 0.0

    @pytest.mark.parametrize("den", [3, 7, 10])
    def test_rational_fails_at_denominator(self, den):
        omega = model.FrequencyVector((1.0 / den,), gamma=0.05, tau=1.5)
        assert not model.check_diophantine(omega, den).passed

    def test_golden_mean_passes(self):
        omega = model.FrequencyVector((model.GOLDEN_MEAN,), gamma=0.25, tau=1.2)
        rep = model.check_diophantine(omega, 10_000)
        assert rep.passed
        assert rep.worst_margin > 0

    def test_two_dim_scan_matches_bruteforce(self):
        omega = model.FrequencyVector(
            (math.sqrt(2) - 1, math.sqrt(3) - 1), gamma=0.05, tau=2.5
        )
        rep = model.check_diophantine(omega, 200)
        # independent brute force
        w = np.array(omega.omega)
        worst = math.inf
        for n1 in range(-200, 201):
            for n2 in range(-200, 201):
                if n1 == 0 and n2 == 0:
                    continue
                x = n1 * w[0] + n2 * w[1]
                dist = abs(x - round(x))
                worst = min(worst, dist - 0.05 / max(abs(n1), abs(n2)) ** 2.5)
        assert rep.passed == (worst >= 0)
        assert rep.worst_margin == pytest.approx(worst, abs=1e-12)


class TestLatticeConfig:
    def test_default_offset_centers_window(self):
        cfg = model.LatticeConfig(n_sites=8)
        assert cfg.offset == -4
        assert list(cfg.sites) == list(range(-4, 4))

    def test_dirichlet_only(self):
        with pytest.raises(ValueError):
            model.LatticeConfig(n_sites=8, boundary="periodic")

    def test_orbit_reduction_mod_one(self, golden):
        P = model.QuasiPeriodicPotential({1: 1e-3}, radius_r=0.01)
        big = model.sample_orbit(P, (0.0,), golden, np.array([10**6]))
        direct = model.eval_series(P, np.array([[(10**6 * model.GOLDEN_MEAN) % 1.0]]))
        assert big[0] == pytest.approx(direct[0], abs=1e-9)
