import math

import numpy as np
import pytest

from hjsing import catalog, errors, model


class TestLegendre:
    def test_zero_momentum(self, free_particle_1d):
        v, h = model.legendre(free_particle_1d, 0.0, [0.0], [0.0])
        assert v[0] == 0.0
        assert h == 0.0

    def test_quadratic_self_conjugate(self, free_particle_1d):
        v, h = model.legendre(free_particle_1d, 0.0, [0.3], [2.0])
        np.testing.assert_allclose(v, [2.0], atol=1e-12)
        np.testing.assert_allclose(h, 2.0, atol=1e-12)

    def test_cosh_model(self):
        m = catalog.lagrangian_from_expression("cosh(v) - 1", 1, name="cosh")
        v, h = model.legendre(m, 0.0, [0.0], [1.0])
        # root of sinh(v) = 1 plus direct evaluation
        v_star = math.asinh(1.0)
        np.testing.assert_allclose(v[0], v_star, atol=1e-6)
        np.testing.assert_allclose(h, v_star - (math.sqrt(2.0) - 1.0), atol=1e-6)

    def test_round_trip(self, sine_problem):
        rng = np.random.default_rng(3)
        m = sine_problem.lagrangian
        for _ in range(15):
            x = rng.uniform(-3, 3, size=1)
            v = rng.normal(size=1) * 2
            p = np.atleast_1d(m.L_v(0.0, x, v))
            v_back, _ = model.legendre(m, 0.0, x, p)
            np.testing.assert_allclose(v_back, v, atol=1e-8)

    def test_not_convex_raises(self):
        m = catalog.lagrangian_from_expression("v^2/2 - abs(v)^3", 1)
        with pytest.raises(errors.NotConvex):
            model.legendre(m, 0.0, [0.0], [8.0])

    def test_iteration_cap_raises(self):
        m = catalog.lagrangian_from_expression("cosh(v) - 1", 1)
        with pytest.raises(errors.NoConvergence):
            model.legendre(m, 0.0, [0.0], [30.0], max_iter=2)


class TestEvolutionaryTransform:
    def test_identity_at_t0(self, counterexample_problem):
        lhat, _ = model.to_evolutionary(counterexample_problem, horizon=1.0)
        v = np.array([1.3])
        assert lhat.L(0.0, np.array([0.2]), v) == pytest.approx(0.5 * 1.3 ** 2)

    def test_hamiltonian_rescale(self, counterexample_problem):
        _, hhat = model.to_evolutionary(counterexample_problem, horizon=1.0)
        t = math.log(2.0)
        p = np.array([1.7])
        # e^t H(x, e^{-t} p) = p^2/4 for the quadratic Hamiltonian at t = ln 2
        assert hhat.H(t, np.array([0.0]), p) == pytest.approx(1.7 ** 2 / 4.0)

    def test_lagrangian_rescale(self):
        prob = catalog.discounted_problem("free_particle", lam=2.0)
        lhat, _ = model.to_evolutionary(prob, horizon=1.0)
        v = np.array([0.8])
        expected = math.e ** 2 * 0.5 * 0.8 ** 2
        assert lhat.L(1.0, np.array([0.0]), v) == pytest.approx(expected)

    def test_time_derivative_is_rate_times_value(self, sine_problem):
        lhat, _ = model.to_evolutionary(sine_problem, horizon=1.0)
        x, v = np.array([0.7]), np.array([-0.4])
        lval = lhat.L(0.6, x, v)
        assert lhat.L_t(0.6, x, v) == pytest.approx(sine_problem.lam * lval)

    def test_overflow(self, sine_problem):
        with pytest.raises(errors.ExponentOverflow):
            model.to_evolutionary(sine_problem, horizon=50.0)

    def test_legendre_consistency(self, sine_problem):
        # Legendre transform of L_hat matches H_hat at random samples
        lhat, hhat = model.to_evolutionary(sine_problem, horizon=1.0)
        rng = np.random.default_rng(11)
        for _ in range(8):
            t = rng.uniform(0, 1)
            x = rng.uniform(-3, 3, size=1)
            p = rng.normal(size=1)
            _, h_val = model.legendre(lhat, t, x, p)
            assert h_val == pytest.approx(float(hhat.H(t, x, p)), abs=1e-8)


class TestGrowthData:
    def test_default_quadratic_conjugate(self):
        g = model.quadratic_growth()
        assert g.theta_lower_conjugate(3.0) == pytest.approx(4.5)

    def test_numeric_conjugate_matches_closed_form(self):
        g = model.GrowthData(c_T=0.0, theta_lower=lambda r: 0.5 * r * r,
                             theta_upper=lambda r: r * r)
        for s in (0.0, 0.5, 2.0, 7.0):
            assert g.theta_lower_conjugate(s) == pytest.approx(0.5 * s * s, abs=1e-7)

    def test_validate(self, sine_problem):
        report = sine_problem.lagrangian.growth.validate()
        assert report["ok"]
        assert report["order_margin"] >= -1e-9
        assert report["fenchel_margin"] >= -1e-7

    def test_negative_offset_rejected(self):
        with pytest.raises(ValueError):
            model.GrowthData(c_T=-1.0, theta_lower=lambda r: r * r,
                             theta_upper=lambda r: r * r)


class TestCheckTonelli:
    def test_free_particle_passes(self, free_particle_1d):
        report = model.check_tonelli(free_particle_1d, [(-2.0, 2.0)], horizon=1.0)
        assert report.passed
        assert report.min_eigenvalue == pytest.approx(1.0)

    def test_cubic_velocity_fails_convexity(self):
        m = catalog.lagrangian_from_expression("v^2/2 - abs(v)^3", 1)
        report = model.check_tonelli(m, [(-1.0, 1.0)], horizon=1.0,
                                     samples=400, speed_cap=10.0)
        assert not report.passed
        assert report.min_eigenvalue < 0  # 1 - 6|v| changes sign at |v| = 1/6

    def test_transformed_model_passes(self, counterexample_problem):
        lhat, _ = model.to_evolutionary(counterexample_problem, horizon=1.0)
        report = model.check_tonelli(lhat, [(-2.0, 2.0)], horizon=1.0)
        assert report.passed
        # L_t = lam L exactly, so the envelope ct1 + ct2*L is tight
        assert report.time_derivative_margin >= -1e-9

    def test_catalog_problems_pass(self):
        for key in ("pendulum", "sine_kink"):
            m = catalog.lagrangian_by_key(key)
            report = model.check_tonelli(m, [(-7.0, 7.0)], horizon=1.0)
            assert report.passed, (key, report.as_dict())


class TestDiscountedProblem:
    def test_growth_sandwich(self, sine_problem):
        rng = np.random.default_rng(5)
        x = rng.uniform(-7, 7, size=(300, 1))
        v = rng.uniform(-6, 6, size=(300, 1))
        assert sine_problem.validate_growth(x, v) >= -1e-12

    def test_rejects_nonpositive_rate(self, free_particle_1d):
        with pytest.raises(ValueError):
            model.DiscountedProblem(lam=0.0, lagrangian=free_particle_1d,
                                    hamiltonian=free_particle_1d.hamiltonian,
                                    c1=0.0, c2=0.0,
                                    theta1=lambda r: r, theta2=lambda r: r)
