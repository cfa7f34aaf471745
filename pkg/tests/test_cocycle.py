import math

import numpy as np
import pytest

from kglattice import cocycle, model


class TestTransferMatrix:
    def test_free_at_zero_energy(self, zero_potential):
        A = cocycle.transfer_matrix(0.0, zero_potential, 0.0)
        assert np.array_equal(A, np.array([[0.0, -1.0], [1.0, 0.0]]))

    def test_determinant_one(self, rng, zero_potential):
        P = model.QuasiPeriodicPotential({1: 1e-3}, radius_r=0.01)
        for _ in range(1000):
            E = float(rng.uniform(-3, 3))
            theta = float(rng.uniform())
            A = cocycle.transfer_matrix(E, P, theta)
            assert abs(np.linalg.det(A) - 1.0) < 1e-12

    def test_entry_oracle(self):
        P = model.QuasiPeriodicPotential({1: 5e-4}, radius_r=0.01)
        A = cocycle.transfer_matrix(1.0, P, 0.0)
        assert A[0, 0] == pytest.approx(-1.0 + model.eval_potential(P, 0.0) - 1.0)
        assert A[0, 1] == -1.0
        assert A[1, 0] == 1.0
        assert A[1, 1] == 0.0


class TestIterate:
    def test_zero_steps_identity(self, golden, zero_potential):
        prod = cocycle.iterate(0.3, zero_potential, golden, 0.0, 0)
        assert np.array_equal(prod.matrix, np.eye(2))
        assert prod.log_scale == 0.0

    def test_one_step(self, golden, zero_potential):
        prod = cocycle.iterate(0.3, zero_potential, golden, 0.2, 1)
        expect = cocycle.transfer_matrix(0.3, zero_potential, 0.2)
        assert np.max(np.abs(prod.matrix * math.exp(prod.log_scale) - expect)) < 1e-14

    def test_free_rotation_period_four(self, golden, zero_potential):
        prod = cocycle.iterate(0.0, zero_potential, golden, 0.0, 4)
        assert np.max(np.abs(prod.matrix * math.exp(prod.log_scale) - np.eye(2))) < 1e-12

    def test_det_preserved_elliptic(self, golden):
        P = model.QuasiPeriodicPotential({1: 5e-4}, radius_r=0.01)
        n = 500
        prod = cocycle.iterate(0.5, P, golden, 0.0, n)
        full = prod.matrix * math.exp(prod.log_scale)
        assert abs(np.linalg.det(full) - 1.0) < n * 1e-12

    def test_det_preserved_hyperbolic_short(self, golden, zero_potential):
        # beyond n ~ 15 the det of a hyperbolic product underflows (the
        # small singular value is e^{-LE n}); check where floats can see it
        n = 12
        prod = cocycle.iterate(3.0, zero_potential, golden, 0.0, n)
        det = np.linalg.det(prod.matrix) * math.exp(2 * prod.log_scale)
        assert abs(det - 1.0) < n * 1e-9  # entries ~ e^{LE n} ~ 1e5, so scaled slack


class TestRotationNumber:
    def test_free_midband(self, golden, zero_potential):
        rho = cocycle.rotation_number(0.0, zero_potential, golden, n_iter=10_000)
        assert rho == pytest.approx(math.pi / 2, abs=1e-10)

    def test_free_edges(self, golden, zero_potential):
        lo = cocycle.rotation_number(-2.0, zero_potential, golden, n_iter=20_000)
        hi = cocycle.rotation_number(2.0, zero_potential, golden, n_iter=20_000)
        assert lo == pytest.approx(0.0, abs=1e-3)
        assert hi == pytest.approx(math.pi, abs=1e-3)

    def test_free_grid_matches_arccos(self, golden, zero_potential):
        E = np.linspace(-1.9, 1.9, 39)
        rho = cocycle.rotation_number(E, zero_potential, golden, n_iter=30_000)
        assert np.max(np.abs(rho - np.arccos(-E / 2))) < 1e-3

    def test_outside_spectrum_locked(self, golden, zero_potential):
        assert cocycle.rotation_number(-3.0, zero_potential, golden, n_iter=5_000) == pytest.approx(
            0.0, abs=1e-3
        )
        assert cocycle.rotation_number(3.0, zero_potential, golden, n_iter=5_000) == pytest.approx(
            math.pi, abs=1e-3
        )

    def test_perturbed_long_orbit_oracle(self, golden):
        P = model.cosine_potential(1e-3)
        E = 0.5
        rho = cocycle.rotation_number(E, P, golden, n_iter=100_000)
        oracle = cocycle.rotation_number(E, P, golden, n_iter=3_000_000)
        assert abs(rho - oracle) < 1e-4

    def test_monotone_on_grid(self, golden):
        P = model.cosine_potential(1e-3)
        E = np.linspace(-2.2, 2.2, 45)
        rho = cocycle.rotation_number(E, P, golden, n_iter=100_000)
        assert np.all(np.diff(rho) >= -1e-4)

    def test_conjugation_invariance(self, golden):
        P = model.cosine_potential(1e-3)
        E = 0.5
        n = 200_000
        base = cocycle.rotation_number(E, P, golden, n_iter=n)
        C = np.array([[1.0, 0.4], [0.0, 1.0]]) @ np.array(
            [[math.cos(0.3), -math.sin(0.3)], [math.sin(0.3), math.cos(0.3)]]
        )
        Cinv = np.linalg.inv(C)
        orbit = model.sample_orbit(P, 0.0, golden, np.arange(n))

        def mats():
            for a in orbit:
                yield Cinv @ np.array([[a - E, -1.0], [1.0, 0.0]]) @ C

        conj = cocycle.rotation_number_sequence(mats())
        assert abs(conj - base) < 1e-4


class TestLyapunov:
    def test_free_elliptic_zero(self, golden, zero_potential):
        le = cocycle.lyapunov_exponent(0.0, zero_potential, golden, n_iter=50_000)
        assert le <= 1e-4

    def test_free_hyperbolic_arccosh(self, golden, zero_potential):
        le = cocycle.lyapunov_exponent(3.0, zero_potential, golden, n_iter=50_000)
        assert le == pytest.approx(math.acosh(1.5), abs=1e-3)

    def test_perturbed_inside_spectrum_small(self, golden):
        P = model.cosine_potential(1e-3)
        le = cocycle.lyapunov_exponent(0.5, P, golden, n_iter=50_000)
        le_long = cocycle.lyapunov_exponent(0.5, P, golden, n_iter=200_000)
        assert le <= 5e-3
        assert le_long <= le + 1e-4

    def test_grid_version_matches_scalar(self, golden, zero_potential):
        les = cocycle.lyapunov_exponent_grid([3.0, 0.0], zero_potential, golden, n_iter=30_000)
        assert les[0] == pytest.approx(math.acosh(1.5), abs=2e-3)
        assert les[1] <= 1e-3
