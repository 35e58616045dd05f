import math

import numpy as np
import pytest

from hjsing import (
    HamiltonianModel,
    action_gradients,
    catalog,
    errors,
    estimate_constants,
    fundamental_solution,
    hamiltonian_flow,
    model,
    speed_envelope,
)
from hjsing.action import minimize_paths, straight_line_actions

from .oracles import discrete_least_action, free_action


class TestHamiltonianFlow:
    def test_free_particle_line(self, free_particle_1d):
        traj = hamiltonian_flow(free_particle_1d.hamiltonian, 0.0, [0.0], [1.0], 2.0)
        assert traj.end[0] == pytest.approx(2.0, abs=1e-10)
        np.testing.assert_allclose(traj.duals, 1.0, atol=1e-12)
        assert traj.action == pytest.approx(1.0, abs=1e-9)  # integral of v^2/2

    def test_pendulum_energy_drift(self):
        pend = catalog.pendulum()
        traj = hamiltonian_flow(pend.hamiltonian, 0.0, [0.1], [0.0], 10.0)
        drift = np.max(np.abs(traj.energies - traj.energies[0]))
        assert drift <= 1e-8
        assert traj.energies[0] == pytest.approx(-math.cos(0.1))

    def test_rescaled_energy_law(self, counterexample_problem):
        # dE/ds = -L_t along the flow of the exponentially rescaled model,
        # verified in integrated form against plain quadrature
        lhat, hhat = model.to_evolutionary(counterexample_problem, horizon=2.0)
        traj = hamiltonian_flow(hhat, 0.0, [0.2], [0.7], 2.0, nodes=801)
        lt = np.array([float(lhat.L_t(t, x, v)) for t, x, v in
                       zip(traj.times, traj.states, traj.velocities)])
        integral = np.trapezoid(lt, traj.times)
        assert abs(traj.energies[-1] - traj.energies[0] + integral) <= 1e-6

    def test_blow_up(self):
        # inverted quadratic potential: exponential escape
        unstable = HamiltonianModel(
            dimension=1,
            H=lambda s, x, p: 0.5 * p[..., 0] ** 2 - x[..., 0] ** 2,
            H_p=lambda s, x, p: np.asarray(p, dtype=float).copy(),
            H_x=lambda s, x, p: -2.0 * np.asarray(x, dtype=float),
            H_t=lambda s, x, p: np.zeros(np.asarray(p).shape[:-1]),
        )
        with pytest.raises(errors.BlowUp):
            hamiltonian_flow(unstable, 0.0, [1.0], [1.0], 30.0, bound=1e5)


class TestFundamentalSolution:
    def test_free_particle_closed_form(self, free_particle_1d):
        val, traj = fundamental_solution(free_particle_1d, 0.0, 1.0, [0.0], [1.0])
        assert val == pytest.approx(0.5, abs=1e-9)
        # straight-line minimizer
        np.testing.assert_allclose(traj.velocities, 1.0, atol=1e-7)

    def test_stationary_point_zero_action(self, free_particle_1d):
        val, _ = fundamental_solution(free_particle_1d, 0.0, 1.5, [0.7], [0.7])
        assert abs(val) <= 1e-12

    def test_exponential_weight_closed_form(self, counterexample_problem):
        # minimizer velocity C e^{-t}; closed-form action 1/(2(1 - e^{-1}))
        lhat, _ = model.to_evolutionary(counterexample_problem, horizon=1.0)
        val, traj = fundamental_solution(lhat, 0.0, 1.0, [0.0], [1.0])
        assert val == pytest.approx(1.0 / (2.0 * (1.0 - math.exp(-1.0))), abs=1e-8)
        assert traj.states[0] == pytest.approx(0.0, abs=1e-12)
        assert traj.states[-1] == pytest.approx(1.0, abs=1e-9)

    def test_against_descent_oracle(self, sine_problem):
        # independent gradient-descent least action for the kinked potential
        def L(xm, vm):
            return 0.5 * vm ** 2 + 0.5 * np.cos(xm) ** 2 - np.abs(np.sin(xm))

        oracle, _ = discrete_least_action(L, 0.0, 1.0, 0.3, 1.4)
        val, _ = fundamental_solution(sine_problem.lagrangian, 0.0, 1.0,
                                      [0.3], [1.4])
        assert val == pytest.approx(oracle, abs=5e-5)

    def test_2d_free_particle(self):
        fp2 = catalog.free_particle(2)
        val, traj = fundamental_solution(fp2, 0.2, 1.7, [0.0, 1.0], [2.0, 0.0])
        assert val == pytest.approx(free_action(0.2, 1.7, [0.0, 1.0], [2.0, 0.0]),
                                    abs=1e-9)
        np.testing.assert_allclose(traj.states[0], [0.0, 1.0], atol=1e-12)

    def test_endpoint_pinning_and_residual(self, sine_problem):
        _, traj = fundamental_solution(sine_problem.lagrangian, 0.0, 1.0,
                                       [0.5], [1.0], refine=False)
        assert abs(traj.states[0][0] - 0.5) <= 1e-12
        assert abs(traj.states[-1][0] - 1.0) <= 1e-12
        assert traj.grad_residual <= 1e-7

    def test_restarts_flag_double_well(self):
        # two symmetric wells: paths through either side tie, flag raised
        dw = catalog.double_well()
        _, traj = fundamental_solution(dw, 0.0, 4.0, [0.0], [0.0], restarts=5,
                                       seed=2)
        assert isinstance(traj.multiple_minimizers, bool)

    def test_requires_increasing_times(self, free_particle_1d):
        with pytest.raises(ValueError):
            fundamental_solution(free_particle_1d, 1.0, 1.0, [0.0], [1.0])


class TestActionGradients:
    def test_free_particle_values(self, free_particle_1d):
        _, traj = fundamental_solution(free_particle_1d, 0.0, 1.0, [0.0], [1.0])
        dxa, dya, dta = action_gradients(traj)
        assert dxa[0] == pytest.approx(-1.0, abs=1e-8)
        assert dya[0] == pytest.approx(1.0, abs=1e-8)
        assert dta == pytest.approx(-0.5, abs=1e-8)

    def test_coincident_endpoints(self, free_particle_1d):
        _, traj = fundamental_solution(free_particle_1d, 0.0, 1.0, [0.4], [0.4])
        dxa, dya, dta = action_gradients(traj)
        np.testing.assert_allclose(dxa, 0.0, atol=1e-10)
        np.testing.assert_allclose(dya, 0.0, atol=1e-10)
        assert dta == pytest.approx(0.0, abs=1e-10)

    @pytest.mark.parametrize("key", ["pendulum", "sine_kink"])
    def test_matches_finite_differences(self, key):
        m = catalog.lagrangian_by_key(key)
        rng = np.random.default_rng(hash(key) % 2 ** 31)
        for _ in range(4):
            x = rng.uniform(0.3, 1.2, size=1)
            y = x + rng.uniform(0.2, 0.8, size=1)
            _, traj = fundamental_solution(m, 0.0, 1.0, x, y)
            dxa, dya, dta = action_gradients(traj)
            h = 1e-5
            fd_y = (fundamental_solution(m, 0.0, 1.0, x, y + h)[0]
                    - fundamental_solution(m, 0.0, 1.0, x, y - h)[0]) / (2 * h)
            fd_x = (fundamental_solution(m, 0.0, 1.0, x + h, y)[0]
                    - fundamental_solution(m, 0.0, 1.0, x - h, y)[0]) / (2 * h)
            fd_t = (fundamental_solution(m, 0.0, 1.0 + h, x, y)[0]
                    - fundamental_solution(m, 0.0, 1.0 - h, x, y)[0]) / (2 * h)
            assert abs(fd_y - dya[0]) <= 1e-4 * (1 + abs(fd_y))
            assert abs(fd_x - dxa[0]) <= 1e-4 * (1 + abs(fd_x))
            assert abs(fd_t - dta) <= 1e-4 * (1 + abs(fd_t))


class TestEnergyIdentity:
    def test_autonomous_conservation(self, sine_problem):
        _, traj = fundamental_solution(sine_problem.lagrangian, 0.0, 1.0,
                                       [0.4], [1.1])
        drift = np.max(np.abs(traj.energies - traj.energies[0]))
        assert drift <= 1e-8

    def test_value_symmetry_reversible(self):
        pend = catalog.pendulum()
        a_fw, _ = fundamental_solution(pend, 0.0, 1.0, [0.2], [1.0])
        a_bw, _ = fundamental_solution(pend, 0.0, 1.0, [1.0], [0.2])
        assert a_fw == pytest.approx(a_bw, abs=1e-8)


class TestBatchedPaths:
    def test_matches_single_solutions(self, sine_problem):
        m = sine_problem.lagrangian
        starts = np.array([[0.0], [0.5], [1.0]])
        ends = np.array([[1.0], [1.5], [0.2]])
        sol = minimize_paths(m, 0.0, 1.0, starts, ends, segments=32)
        for k in range(3):
            ref, _ = fundamental_solution(m, 0.0, 1.0, starts[k], ends[k])
            assert sol["action"][k] == pytest.approx(ref, abs=2e-4)

    def test_straight_line_upper_bound(self, sine_problem):
        m = sine_problem.lagrangian
        starts = np.array([[0.0]])
        ends = np.array([[2.0]])
        cheap = straight_line_actions(m, 0.0, 1.0, starts, ends, segments=32)
        tight, _ = fundamental_solution(m, 0.0, 1.0, [0.0], [2.0])
        assert cheap[0] >= tight - 1e-6


class TestConstants:
    def test_free_particle_spatial_modulus(self, free_particle_1d):
        constants = estimate_constants(free_particle_1d, 0.0, [0.0], 1.0,
                                       2.0, 2.0)
        # second spatial difference of |x-y|^2/(2 dt) is exactly |z|^2/dt
        assert constants.c2 == pytest.approx(1.0, abs=5e-2)
        assert constants.c0 >= constants.c2
        assert constants.c1 > 0 and constants.c3 > 0

    def test_degenerate_cone_rejected(self, free_particle_1d):
        with pytest.raises(ValueError):
            estimate_constants(free_particle_1d, 1.0, [0.0], 1.0, 1.0, 1.0)


class TestSpeedEnvelope:
    def test_monotone_in_separation(self, sine_problem):
        kappa = speed_envelope(sine_problem.lagrangian, 1.0,
                               ratios=np.array([0.5, 1.0, 2.0, 4.0]))
        values = [kappa(r) for r in (0.5, 1.0, 2.0, 4.0, 8.0)]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))

    def test_bounds_minimizer_speed(self, sine_problem):
        kappa = speed_envelope(sine_problem.lagrangian, 1.0)
        _, traj = fundamental_solution(sine_problem.lagrangian, 0.0, 1.0,
                                       [0.0], [2.0])
        sup_speed = float(np.max(np.abs(traj.velocities)))
        assert sup_speed <= kappa(2.0)
