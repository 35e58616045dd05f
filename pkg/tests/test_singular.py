import math

import numpy as np
import pytest

from hjsing import (
    GridFunction,
    aubry_candidates,
    catalog,
    cut_time,
    cut_time_field,
    errors,
    estimate_constants,
    homotopy,
    is_singular,
    lipschitz_certificate,
    propagation_step,
    reachable_gradients,
    retraction,
    solver,
    strong_critical_test,
    trace_singular_curve,
)
from hjsing.action import minimize_paths
from hjsing.laxoleinik import solution_lipschitz_bound
from hjsing.singular import CutTimeField, _argmax_point

from .oracles import sine_kink_cut_time, shock_speed


@pytest.fixture(scope="module")
def sine_field(sine_problem, sine_exact_grid):
    return solver.DiscountedField(sine_problem, sine_exact_grid)


class TestReachableGradients:
    def test_kink_pair(self, hopf_kink_field, free_particle_1d):
        rg = reachable_gradients(hopf_kink_field, free_particle_1d, 1.0, [0.0])
        momenta = sorted(float(p[0]) for _, p in rg.elements)
        np.testing.assert_allclose(momenta, [-1.0, 1.0], atol=1e-6)
        # energies satisfy q = -H(t, x, p)
        for q, p in rg.elements:
            assert q == pytest.approx(-0.5 * float(p[0]) ** 2, abs=1e-8)
        assert rg.diameter == pytest.approx(2.0, abs=1e-6)

    def test_one_sided_point(self, hopf_kink_field, free_particle_1d):
        rg = reachable_gradients(hopf_kink_field, free_particle_1d, 1.0, [2.0])
        assert len(rg.elements) == 1
        assert rg.elements[0][1][0] == pytest.approx(-1.0, abs=1e-6)
        assert rg.diameter == 0.0

    def test_smooth_field_matches_scan_gradient(self, free_particle_1d):
        # u0 = -cos x stays smooth for t < 1; the lone reachable gradient is
        # (x - z*)/t with z* from a dense scan of the Hopf-Lax objective
        u0 = GridFunction.from_callable(lambda p: -np.cos(p[..., 0]),
                                        [(-np.pi, np.pi)], 512, periodic=True)
        field = solver.EvolutionaryField(free_particle_1d, u0)
        t, x = 0.5, 0.3
        z = np.linspace(-np.pi, np.pi, 400001)
        z_star = z[np.argmin(-np.cos(z) + (x - z) ** 2 / (2 * t))]
        rg = reachable_gradients(field, free_particle_1d, t, [x])
        assert len(rg.elements) == 1
        # the argmin of the interpolated objective sits within one cell of
        # the true one, so the momentum is accurate to the grid-spacing scale
        assert rg.elements[0][1][0] == pytest.approx((x - z_star) / t,
                                                     abs=float(u0.spacing[0]))

    def test_discounted_kink(self, sine_field, sine_problem):
        rg = reachable_gradients(sine_field, sine_problem.lagrangian, 0.0, [0.0])
        momenta = sorted(float(p[0]) for p in rg.elements)
        np.testing.assert_allclose(momenta, [-1.0, 1.0], atol=5e-3)

    def test_is_singular_flags(self, hopf_kink_field, free_particle_1d):
        flag, cert = is_singular(hopf_kink_field, free_particle_1d, 1.0, [0.0])
        assert flag and cert.diameter > 1.9
        flag, cert = is_singular(hopf_kink_field, free_particle_1d, 1.0, [2.0])
        assert not flag


class TestPropagationStep:
    def test_stationary_kink(self, hopf_kink_field, free_particle_1d):
        step = propagation_step(hopf_kink_field, free_particle_1d, 0.5, [0.0],
                                1.5)
        assert np.max(np.abs(step.points)) <= 1e-6   # symmetry holds it at 0
        assert all(c.diameter > 1.9 for c in step.certificates)

    def test_shock_speed(self, shock_field, free_particle_1d):
        step = propagation_step(shock_field, free_particle_1d, 0.5, [0.25], 1.5)
        speeds = np.diff(np.concatenate([[0.25], step.points[:, 0]])) \
            / np.diff(np.concatenate([[0.5], step.times]))
        target = shock_speed(2.0, -1.0)
        assert np.max(np.abs(speeds - target)) <= 5e-2

    def test_discounted_symmetric_kink(self, sine_field, sine_problem):
        step = propagation_step(sine_field, sine_problem.lagrangian, 1.0,
                                [0.0], 2.0)
        assert np.max(np.abs(step.points)) <= 1e-2   # even symmetry about 0

    def test_schedule_stall_guard(self, hopf_kink_field, free_particle_1d):
        with pytest.raises(errors.ScheduleStall):
            propagation_step(hopf_kink_field, free_particle_1d, 0.5, [0.0],
                             1.5, step_cap=1e-8)


class TestTrace:
    def test_stationary_kink_curve(self, hopf_kink_field, free_particle_1d):
        curve = trace_singular_curve(hopf_kink_field, free_particle_1d, 0.5,
                                     [0.0], 3.0)
        assert float(np.max(np.abs(curve.points))) <= 1e-2
        assert np.all(curve.certificate_diameters[1:] >= 1.9)
        assert curve.localization_ok
        assert curve.times[-1] >= 3.0 - 1e-9

    def test_shock_curve(self, shock_field, free_particle_1d):
        curve = trace_singular_curve(shock_field, free_particle_1d, 0.5,
                                     [0.25], 2.0)
        err = np.max(np.abs(curve.points[:, 0] - curve.times / 2))
        assert err <= 5e-2

    def test_discounted_trace_stays_at_kink(self, sine_field, sine_problem):
        curve = trace_singular_curve(sine_field, sine_problem.lagrangian, 1.0,
                                     [np.pi], 2.5)
        assert float(np.max(np.abs(curve.points - np.pi))) <= 1e-2

    def test_rejects_smooth_start(self, hopf_kink_field, free_particle_1d):
        with pytest.raises(errors.InvalidProblem):
            trace_singular_curve(hopf_kink_field, free_particle_1d, 0.5, [2.0],
                                 1.5)

    def test_csv_export(self, tmp_path, hopf_kink_field, free_particle_1d):
        curve = trace_singular_curve(hopf_kink_field, free_particle_1d, 0.5,
                                     [0.0], 1.5)
        path = tmp_path / "curve.csv"
        curve.write_csv(path, comments=["demo"])
        lines = [l for l in path.read_text().splitlines()
                 if l and not l.startswith("#")]
        assert lines[0] == "s,x1,step_size,certificate_diameter"
        assert len(lines) == len(curve.times) + 1

    def test_continuity_in_start_point(self, shock_field, free_particle_1d):
        delta = 1e-3
        c1 = trace_singular_curve(shock_field, free_particle_1d, 0.5,
                                  [0.25], 1.2)
        c2 = trace_singular_curve(shock_field, free_particle_1d, 0.5,
                                  [0.25 + delta], 1.2, require_singular=False)
        # compare at the common ladder times of the first block
        n = min(len(c1.times), len(c2.times))
        gap = np.max(np.abs(c1.points[:n, 0] - c2.points[:n, 0]))
        assert gap <= 50 * delta + 1e-6

    def test_exclusion_certificate(self, hopf_kink_field, free_particle_1d):
        # the step's dual momentum lies in the superdifferential but away
        # from every reachable gradient at the new point
        step = propagation_step(hopf_kink_field, free_particle_1d, 0.5, [0.0],
                                1.5)
        t = float(step.times[-1])
        y = step.points[-1]
        sol = minimize_paths(free_particle_1d, 0.5, t, np.array([[0.0]]),
                             y[None, :], segments=32)
        nodes = sol["nodes"][0]
        dt = (t - 0.5) / 32
        vel_end = (3 * nodes[-1] - 4 * nodes[-2] + nodes[-3]) / (2 * dt)
        p_step = float(free_particle_1d.L_v(t, y, vel_end)[0])
        cert = step.certificates[-1]
        momenta = cert.momenta()[:, 0]
        lo, hi = momenta.min(), momenta.max()
        assert lo - 1e-6 <= p_step <= hi + 1e-6       # inside the hull
        assert np.min(np.abs(momenta - p_step)) > 1e-4  # not a reachable one


class TestStepMapRegularity:
    def test_lipschitz_ratio(self, shock_field, free_particle_1d):
        # |y(x1) - y(x2)| <= (2 C0 / C2) |x1 - x2| for nearby starts
        lam2 = shock_field.lambda2(1.5)
        constants = estimate_constants(free_particle_1d, 0.5, [0.25], 1.5,
                                       min(lam2, 4.0), min(lam2, 4.0))
        t1, t = 0.5, 0.75
        radius = min(lam2, 4.0) * (t - t1)
        ys = []
        for x1 in ([0.25], [0.27]):
            y, _, _, _ = _argmax_point(shock_field, free_particle_1d, t1,
                                       np.array(x1), t, radius)
            ys.append(y[0])
        ratio = abs(ys[1] - ys[0]) / 0.02
        assert ratio <= 2 * constants.c0 / constants.c2 * 1.1


class TestLipschitzCertificate:
    def test_stationary_curve(self, hopf_kink_field, free_particle_1d):
        curve = trace_singular_curve(hopf_kink_field, free_particle_1d, 0.5,
                                     [0.0], 1.5)
        constants = estimate_constants(free_particle_1d, 0.5, [0.0], 1.5,
                                       2.0, 2.0)
        growth = hopf_kink_field.growth_for(1.5)
        K_T = solution_lipschitz_bound(growth, 1.5,
                                       hopf_kink_field.u0.lipschitz_estimate)
        report = lipschitz_certificate(curve, constants, K_T)
        assert report["passed"]
        assert report["max_quotient"] <= 1e-6

    def test_shock_curve_quotients(self, shock_field, free_particle_1d):
        curve = trace_singular_curve(shock_field, free_particle_1d, 0.5,
                                     [0.25], 1.5)
        constants = estimate_constants(free_particle_1d, 0.5, [0.25], 1.5,
                                       3.0, 3.0)
        growth = shock_field.growth_for(1.5)
        K_T = solution_lipschitz_bound(growth, 1.5,
                                       shock_field.u0.lipschitz_estimate)
        report = lipschitz_certificate(curve, constants, K_T)
        assert report["max_quotient"] == pytest.approx(0.5, abs=5e-2)
        assert report["passed"]


class TestCutTime:
    def test_characteristic_travel_time(self, sine_problem, sine_exact_grid):
        tau, info = cut_time(sine_problem, sine_exact_grid, [np.pi / 4],
                             horizon=6.0)
        assert tau == pytest.approx(sine_kink_cut_time(np.pi / 4), abs=5e-2)
        assert tau == pytest.approx(math.log(1 + math.sqrt(2)), abs=5e-2)
        assert not info["clamped"]

    def test_stationary_point_clamps(self, sine_problem, sine_exact_grid):
        tau, info = cut_time(sine_problem, sine_exact_grid, [np.pi / 2],
                             horizon=6.0)
        assert tau == 6.0 and info["clamped"]

    def test_kink_is_cut_point(self, sine_problem, sine_exact_grid):
        tau, info = cut_time(sine_problem, sine_exact_grid, [0.0], horizon=6.0)
        assert tau == 0.0 and info["cut"]

    def test_zero_solution_clamps_everywhere(self, counterexample_problem):
        v = GridFunction.from_callable(lambda p: 0.0 * p[..., 0],
                                       [(-2.0, 2.0)], 33, periodic=True)
        for x in (-1.0, 0.0, 0.7):
            tau, info = cut_time(counterexample_problem, v, [x], horizon=5.0)
            assert tau == 5.0 and info["clamped"]


@pytest.fixture(scope="module")
def coarse_field(sine_problem):
    v = GridFunction.from_callable(lambda p: -np.abs(np.sin(p[..., 0])),
                                   [(-2 * np.pi, 2 * np.pi)], 64,
                                   periodic=True)
    return cut_time_field(sine_problem, v, horizon=6.0)


class TestCutTimeField:

    def test_majorant_strict(self, coarse_field):
        assert np.all(coarse_field.alpha.values > coarse_field.tau.values)
        assert np.all(coarse_field.tau.values >= 0)

    def test_invariant_enforced(self, coarse_field):
        with pytest.raises(ValueError):
            CutTimeField(tau=coarse_field.tau, alpha=coarse_field.tau,
                         horizon=6.0, calib_tol=1e-3)

    def test_export(self, tmp_path, coarse_field):
        coarse_field.write(tmp_path / "tau.grid", tmp_path / "alpha.grid")
        tau, _ = GridFunction.read(tmp_path / "tau.grid")
        assert tau.clamp_value == 6.0
        np.testing.assert_array_equal(tau.values, coarse_field.tau.values)

    def test_semicontinuity_proxy(self, sine_problem, sine_exact_grid):
        # coarse tau never exceeds the max over nearby fine samples by more
        # than tolerance (upper semicontinuity direction)
        from hjsing.singular import cut_times
        coarse_nodes = np.linspace(0.3, 2.8, 9)[:, None]
        fine_nodes = np.linspace(0.3, 2.8, 17)[:, None]
        coarse_vals = cut_times(sine_problem, sine_exact_grid, coarse_nodes,
                                horizon=6.0)
        fine_vals = cut_times(sine_problem, sine_exact_grid, fine_nodes,
                              horizon=6.0)
        for i, tau_c in enumerate(coarse_vals):
            children = fine_vals[max(0, 2 * i - 1): 2 * i + 2]
            assert tau_c - np.max(children) <= 0.1


class TestHomotopyRetraction:
    def test_identity_at_zero(self, sine_field, sine_problem):
        x = np.array([0.9])
        out = homotopy(sine_field, sine_problem.lagrangian, x, 0.0)
        np.testing.assert_array_equal(out, x)

    def test_reaches_kink(self, sine_field, sine_problem):
        out = homotopy(sine_field, sine_problem.lagrangian, [np.pi / 4], 1.2)
        assert abs(out[0]) <= 1e-2

    def test_singular_start_stays(self, sine_field, sine_problem):
        out = homotopy(sine_field, sine_problem.lagrangian, [0.0], 0.5)
        assert abs(out[0]) <= 1e-2

    def test_retraction_uses_majorant(self, sine_field, sine_problem):
        # the majorant needs the grid fine enough that the mollifier bump
        # covers the between-node variation of tau near the start point
        v256 = GridFunction.from_callable(lambda p: -np.abs(np.sin(p[..., 0])),
                                          [(-2 * np.pi, 2 * np.pi)], 256,
                                          periodic=True)
        ctf = cut_time_field(sine_problem, v256, horizon=6.0)
        x = np.array([np.pi / 4])
        g0 = retraction(sine_field, sine_problem.lagrangian, ctf, x, 0.0)
        np.testing.assert_array_equal(g0, x)
        assert float(ctf.alpha(x)) > float(ctf.tau(x))
        g1 = retraction(sine_field, sine_problem.lagrangian, ctf, x, 1.0)
        assert abs(g1[0]) <= 1e-2

    def test_evolutionary_rejected(self, hopf_kink_field, free_particle_1d):
        with pytest.raises(errors.InvalidProblem):
            homotopy(hopf_kink_field, free_particle_1d, [0.0], 0.5)


class TestStrongCritical:
    def test_smooth_noncritical(self, sine_problem, sine_exact_grid):
        assert not strong_critical_test(sine_problem, sine_exact_grid, [0.3])

    def test_kink_critical(self, sine_problem, sine_exact_grid):
        assert strong_critical_test(sine_problem, sine_exact_grid, [0.0])

    def test_asymmetric_kink_interval(self, free_particle_1d):
        # slopes -1 and 2 at the kink: the drift hull [-1, 2] contains 0
        prob = catalog.discounted_problem("free_particle", lam=1.0)
        v = GridFunction.from_callable(
            lambda p: np.minimum(-np.sin(p[..., 0]), 2 * np.sin(p[..., 0])),
            [(-np.pi, np.pi)], 256, periodic=True)
        assert strong_critical_test(prob, v, [0.0])


class TestAubryCandidates:
    def test_zero_solution_all_candidates(self, counterexample_problem):
        v = GridFunction.from_callable(lambda p: 0.0 * p[..., 0],
                                       [(-2.0, 2.0)], 17, periodic=True)
        field = solver.DiscountedField(counterexample_problem, v)
        pts, mask = aubry_candidates(field, horizon=5.0)
        assert mask.all()

    def test_sine_candidates_at_stationary_points(self, sine_field):
        nodes = np.linspace(-2 * np.pi, 2 * np.pi, 64, endpoint=False)[:, None]
        pts, mask = aubry_candidates(sine_field, horizon=6.0, nodes=nodes)
        assert len(pts) > 0
        h = 4 * np.pi / 64
        targets = np.array([-3 * np.pi / 2, -np.pi / 2, np.pi / 2, 3 * np.pi / 2])
        for p in pts[:, 0]:
            assert np.min(np.abs(p - targets)) <= h + 1e-9

    def test_evolutionary_rejected(self, hopf_kink_field):
        with pytest.raises(errors.InvalidProblem):
            aubry_candidates(hopf_kink_field, horizon=5.0)
