import math

import numpy as np
import pytest
import scipy.integrate

from kglattice import dispersion, evolve, model, operator


def delta_state(n):
    u = np.zeros(n)
    u[n // 2] = 1.0
    return evolve.RealState(u=u, v=np.zeros(n))


class TestLinearPropagate:
    def test_time_zero_identity(self, free_512, rng):
        _, _, D = free_512
        s0 = evolve.RealState(u=rng.normal(size=512), v=rng.normal(size=512))
        s1 = evolve.linear_propagate(D, s0, 0.0)
        assert np.array_equal(s1.u, s0.u)
        assert np.array_equal(s1.v, s0.v)

    def test_plane_wave_scalar_ode(self, free_512):
        _, _, D = free_512
        k = 200
        vec, Ek = D.eigenvectors[:, k], D.eigenvalues[k]
        for t in (0.7, 13.5):
            st = evolve.linear_propagate(D, evolve.RealState(u=vec, v=np.zeros(512)), t)
            assert np.max(np.abs(st.u - math.cos(t * math.sqrt(Ek + 3.0)) * vec)) < 1e-12

    def test_against_rk_oracle(self, golden, zero_potential):
        # independent high-order ODE integration on the same matrix
        N = 4096
        cfg = model.LatticeConfig(n_sites=N)
        H = operator.build_finite_section(zero_potential, golden, cfg)
        D = operator.eigendecompose(H)
        s0 = delta_state(N)

        def rhs(t, y):
            u, v = y[:N], y[N:]
            return np.concatenate([v, -(H.matvec(u) + 3.0 * u)])

        sol = scipy.integrate.solve_ivp(
            rhs,
            (0.0, 100.0),
            np.concatenate([s0.u, s0.v]),
            method="DOP853",
            rtol=1e-11,
            atol=1e-13,
        )
        st = evolve.linear_propagate(D, s0, 100.0)
        assert abs(np.max(np.abs(st.u)) - np.max(np.abs(sol.y[:N, -1]))) < 1e-8
        assert np.max(np.abs(st.u - sol.y[:N, -1])) < 1e-8

    def test_negative_shifted_eigenvalue_raises(self, golden):
        fake = operator.EigenDecomposition(
            eigenvalues=np.array([-3.5, 0.0]), eigenvectors=np.eye(2)
        )
        with pytest.raises(ValueError):
            evolve.linear_propagate(fake, evolve.RealState(u=np.ones(2), v=np.zeros(2)), 1.0)

    def test_energy_conservation_long_run(self, golden):
        P = model.cosine_potential(1e-3)
        cfg = model.LatticeConfig(n_sites=512)
        D = operator.eigendecompose(operator.build_finite_section(P, golden, cfg))
        s0 = delta_state(512)
        e0 = evolve.energy(s0, P, golden, cfg).linear_energy
        for s in evolve.propagate_times(D, s0, np.linspace(0, 1000, 11)):
            e = evolve.energy(s, P, golden, cfg).linear_energy
            assert abs(e - e0) / e0 <= 1e-10

    def test_theorem_l2_bound_random_data(self, golden, rng):
        P = model.cosine_potential(1e-3)
        eps0 = model.strip_norm(P)
        cfg = model.LatticeConfig(n_sites=256)
        D = operator.eigendecompose(operator.build_finite_section(P, golden, cfg))
        s0 = evolve.RealState(u=rng.normal(size=256) / 16, v=rng.normal(size=256) / 16)
        rhs = (1 + 2 * eps0) * np.sum((5 + 2 * eps0) * s0.u**2 + s0.v**2)
        for s in evolve.propagate_times(D, s0, np.linspace(0, 300, 31)):
            assert np.sum(s.u**2) <= rhs

    def test_finite_propagation_speed(self, golden, zero_potential):
        N = 512
        cfg = model.LatticeConfig(n_sites=N)
        D = operator.eigendecompose(operator.build_finite_section(zero_potential, golden, cfg))
        s0 = delta_state(N)
        sites = cfg.sites
        for t in (20.0, 100.0):
            st = evolve.linear_propagate(D, s0, t)
            mass = st.u**2 + st.v**2
            outside = np.abs(sites) > 1.2 * t + 50
            assert np.sum(mass[outside]) <= 1e-8 * np.sum(mass)


class TestComplexification:
    def test_zero_maps_to_zero(self, free_512):
        _, _, D = free_512
        c = evolve.to_complex(evolve.RealState(u=np.zeros(512), v=np.zeros(512)), D)
        assert np.all(c.q == 0)

    def test_transform_matrix_inverse(self):
        M, Minv = evolve.transform_matrix()
        assert np.max(np.abs(M @ Minv - np.eye(2))) < 1e-15
        assert np.max(np.abs(Minv @ M - np.eye(2))) < 1e-15

    def test_round_trip(self, free_512, rng):
        _, _, D = free_512
        s0 = evolve.RealState(u=rng.normal(size=512), v=rng.normal(size=512))
        back = evolve.from_complex(evolve.to_complex(s0, D), D)
        scale = max(np.max(np.abs(s0.u)), np.max(np.abs(s0.v)))
        assert np.max(np.abs(back.u - s0.u)) < 1e-12 * scale
        assert np.max(np.abs(back.v - s0.v)) < 1e-12 * scale

    def test_two_path_equivalence(self, free_512, rng):
        _, _, D = free_512
        s0 = evolve.RealState(u=rng.normal(size=512), v=rng.normal(size=512))
        t = 17.3
        via_complex = evolve.from_complex(
            evolve.complex_propagate(D, evolve.to_complex(s0, D), t), D
        )
        direct = evolve.linear_propagate(D, s0, t)
        scale = np.max(np.abs(direct.u))
        assert np.max(np.abs(via_complex.u - direct.u)) < 1e-10 * scale
        assert np.max(np.abs(via_complex.v - direct.v)) < 1e-10 * scale


class TestEnergy:
    def test_delta_displacement(self, golden, zero_potential):
        cfg = model.LatticeConfig(n_sites=64)
        s = delta_state(64)
        rep = evolve.energy(s, zero_potential, golden, cfg)
        assert rep.linear_energy == pytest.approx(1.5)
        assert rep.nonlinear_term == 0.0

    def test_delta_velocity(self, golden, zero_potential):
        cfg = model.LatticeConfig(n_sites=64)
        u = np.zeros(64)
        v = np.zeros(64)
        v[32] = 1.0
        rep = evolve.energy(evolve.RealState(u=u, v=v), zero_potential, golden, cfg)
        assert rep.linear_energy == pytest.approx(0.5)

    def test_random_state_term_by_term(self, golden, rng):
        P = model.cosine_potential(1e-2)
        cfg = model.LatticeConfig(n_sites=32)
        s = evolve.RealState(u=rng.normal(size=32) / 10, v=rng.normal(size=32) / 10)
        rep = evolve.energy(s, P, golden, cfg, lam=1.0, kappa=1)
        # independent recomputation, python loop
        V = [model.eval_potential(P, (0.0 + n * model.GOLDEN_MEAN,)) for n in cfg.sites]
        total = 0.0
        u = list(s.u) + [0.0]
        for i in range(32):
            total += 0.5 * (s.v[i] ** 2 + V[i] * s.u[i] ** 2)
            total -= 1.0 / 4.0 * s.u[i] ** 4
        for i in range(-1, 32):
            left = u[i] if i >= 0 else 0.0
            total += 0.5 * (u[i + 1] - left) ** 2 if i >= 0 else 0.5 * u[0] ** 2
        assert rep.total == pytest.approx(total, rel=1e-12)


class TestNonlinearEvolve:
    def test_lambda_zero_matches_linear(self, golden, zero_potential):
        N = 128
        cfg = model.LatticeConfig(n_sites=N)
        D = operator.eigendecompose(operator.build_finite_section(zero_potential, golden, cfg))
        s0 = delta_state(N)
        times = [2.5, 5.0, 10.0]
        traj = evolve.nonlinear_evolve(D, zero_potential, s0, 0.0, 1, 10.0, 0.01, sample_times=times)
        for st in traj.states:
            ref = evolve.linear_propagate(D, s0, st.time)
            assert np.max(np.abs(st.u - ref.u)) < 1e-9

    def test_defocusing_energy_drift(self, golden, zero_potential):
        N = 128
        cfg = model.LatticeConfig(n_sites=N)
        D = operator.eigendecompose(operator.build_finite_section(zero_potential, golden, cfg))
        u = np.zeros(N)
        v = np.zeros(N)
        u[N // 2] = 1e-3
        v[N // 2] = 1e-3
        s0 = evolve.RealState(u=u, v=v)
        lam, kappa = -1.0, 6
        e0 = evolve.energy(s0, zero_potential, golden, cfg, lam, kappa).total
        drifts = {}
        for dt in (0.01, 0.005):
            traj = evolve.nonlinear_evolve(
                D, zero_potential, s0, lam, kappa, 100.0, dt, sample_times=[100.0]
            )
            e1 = evolve.energy(traj.states[-1], zero_potential, golden, cfg, lam, kappa).total
            drifts[dt] = abs(e1 - e0) / abs(e0)
        assert drifts[0.01] <= 1e-6
        # Richardson check: halving dt must not worsen the drift
        assert drifts[0.005] <= drifts[0.01] + 1e-12

    def test_focusing_blowup_aborts(self, golden, zero_potential):
        N = 64
        cfg = model.LatticeConfig(n_sites=N)
        D = operator.eigendecompose(operator.build_finite_section(zero_potential, golden, cfg))
        s0 = evolve.RealState(u=np.full(N, 2.0), v=np.zeros(N))
        traj = evolve.nonlinear_evolve(D, zero_potential, s0, 1.0, 3, 10.0, 0.01)
        assert traj.aborted
        assert traj.abort_time is not None
        assert len(traj.states) >= 1

    def test_validation(self, free_512, zero_potential):
        _, _, D = free_512
        s0 = delta_state(512)
        with pytest.raises(ValueError):
            evolve.nonlinear_evolve(D, zero_potential, s0, 1.0, 1, 1.0, -0.1)
        with pytest.raises(ValueError):
            evolve.nonlinear_evolve(D, zero_potential, s0, 1.0, 0, 1.0, 0.1)


class TestDecayProfile:
    def test_single_state(self):
        s = evolve.RealState(u=np.array([3.0, -4.0]), v=np.zeros(2))
        prof = evolve.decay_profile([s])
        assert prof.linf[0] == 4.0
        assert prof.l2[0] == 5.0
        assert prof.l1[0] == 7.0

    def test_norm_ordering(self, free_512, rng):
        _, _, D = free_512
        s0 = evolve.RealState(u=rng.normal(size=512), v=rng.normal(size=512))
        prof = evolve.decay_profile(evolve.propagate_times(D, s0, np.linspace(0, 40, 9)))
        assert np.all(prof.linf <= prof.l2 + 1e-12)
        assert np.all(prof.l2 <= prof.l1 + 1e-12)

    def test_pair_norm_constant_linf_decays(self, free_512):
        _, _, D = free_512
        s0 = delta_state(512)
        states = evolve.propagate_times(D, s0, np.linspace(0, 100, 11))
        prof = evolve.decay_profile(states)
        pair = evolve.pair_l2_profile(D, states)
        assert np.max(np.abs(pair - pair[0])) <= 1e-10 * pair[0]
        assert prof.linf[-1] < 0.25 * prof.linf[0]


class TestDuhamel:
    @pytest.fixture(scope="class")
    def setup(self, golden, zero_potential):
        N = 256
        cfg = model.LatticeConfig(n_sites=N)
        D = operator.eigendecompose(operator.build_finite_section(zero_potential, golden, cfg))
        return N, D

    def test_linear_case_single_iteration(self, setup):
        N, D = setup
        psi = np.zeros(N)
        psi[N // 2] = 0.01
        res = evolve.duhamel_fixed_point(
            D, psi, psi, 0.0, 6, 0.32, np.linspace(0, 20, 81)
        )
        assert res.converged
        assert res.iterations == 1
        ref = evolve.propagate_times(D, evolve.RealState(u=psi, v=psi), np.linspace(0, 20, 81))
        assert np.max(np.abs(res.u - np.stack([s.u for s in ref]))) < 1e-12

    def test_contraction_and_oracle_agreement(self, setup):
        N, D = setup
        kappa, zeta = 6, 0.32
        tgrid = np.linspace(0, 50, 201)
        i0 = N // 2
        probe = np.zeros(N)
        probe[i0] = 1.0
        K = evolve.dispersive_constant(D, probe, probe, np.linspace(0, 200, 401), zeta)
        C1 = evolve.convolution_constant(zeta, zeta * (2 * kappa - 1))
        dstar = evolve.smallness_threshold(K, C1, kappa)
        psi = probe * (dstar / 2)
        res = evolve.duhamel_fixed_point(
            D, psi, psi, -1.0, kappa, zeta, tgrid, delta_star=dstar
        )
        assert res.converged
        assert res.smallness_ok
        assert all(r <= 0.5 for r in res.contraction_factors)
        traj = evolve.nonlinear_evolve(
            D,
            model.zero_potential(),
            evolve.RealState(u=psi, v=psi),
            -1.0,
            kappa,
            50.0,
            0.005,
            sample_times=tgrid,
        )
        split = np.stack([s.u for s in traj.states])
        assert np.max(np.abs(res.u - split)) < 1e-6

    def test_smallness_gate_warns_not_fatal(self, setup):
        N, D = setup
        psi = np.zeros(N)
        psi[N // 2] = 1.0
        res = evolve.duhamel_fixed_point(
            D, psi, psi, -1.0, 6, 0.32, np.linspace(0, 5, 21), delta_star=0.01, max_iter=4
        )
        assert not res.smallness_ok

    def test_hypothesis_validation(self, setup):
        N, D = setup
        psi = np.zeros(N)
        with pytest.raises(ValueError):
            evolve.duhamel_fixed_point(D, psi, psi, -1.0, 4, 0.32, np.linspace(0, 5, 11))
        with pytest.raises(ValueError):
            evolve.duhamel_fixed_point(D, psi, psi, -1.0, 6, 0.4, np.linspace(0, 5, 11))

    def test_convolution_constant_dominates_pointwise(self):
        # C1 must dominate the weighted integral at any probe time
        zeta, nu = 0.32, 3.52
        C1 = evolve.convolution_constant(zeta, nu)
        for t in (0.0, 2.0, 37.0):
            val, _ = scipy.integrate.quad(
                lambda s: evolve.bracket(t - s) ** (-zeta) * evolve.bracket(s) ** (-nu),
                0,
                5000,
                limit=300,
            )
            assert val * evolve.bracket(t) ** zeta <= C1 + 1e-6

    def test_smallness_threshold_formula(self):
        K, C1, kappa = 1.2, 1.4, 6
        expect = 0.5 * (6 * C1 * (4 * K) ** 11) ** (-1.0 / 12.0)
        assert evolve.smallness_threshold(K, C1, kappa) == pytest.approx(expect, rel=1e-14)
