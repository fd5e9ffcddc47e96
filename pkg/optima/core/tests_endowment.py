import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from .endowment import (
    ConstantRate, EndowmentKind, EndowmentModel, LinearInPriceRate, TabulatedRate, VarPi, floor_martingale,
    minimal_wealth, parse_rate, phi_sensitivities, varpi, varpi_estimate,
)
from .exceptions import DomainError
from .market import MarketSpec, TimeGrid, simulate_paths
from .verify import martingale_test


class BaseEndowmentTestCase(SimpleTestCase):
    """
    Base class for endowment tests.
    ``self.flat`` has r = 0 and theta = 0, so H = 1 on every path.
    """
    def setUp(self):
        super().setUp()
        self.flat = MarketSpec.constant(rate=0.0, drift=0.0, volatility=0.2, horizon=1.0)
        self.unit_income = EndowmentModel(ConstantRate(1.0), EndowmentKind.DETERMINISTIC)
        self.grid = TimeGrid.uniform(0.0, 1.0, 10)

    def price_income(self, paths=4000, seed=5):
        """epsilon(t, p) = p_1"""
        return EndowmentModel(
            LinearInPriceRate(1, 1.0), EndowmentKind.MARKOV, mc_inner_paths=paths, mc_seed=seed, mc_steps=20,
        )


class VarPiTests(BaseEndowmentTestCase):

    def test_zero_endowment(self):
        self.assertEqual(varpi(EndowmentModel.zero(), self.flat, 0.3, np.array([1.0])), 0.0)

    def test_unit_income_closed_form(self):
        self.assertEqual(varpi(self.unit_income, self.flat, 0.0, np.array([1.0])), -1.0)

    def test_unit_income_monte_carlo(self):
        value, error = varpi_estimate(self.unit_income, self.flat, 0.0, np.array([1.0]), mode=VarPi.MONTE_CARLO)
        self.assertLessEqual(abs(value + 1.0), 3.0 * error + 1e-12)
        self.assertEqual(varpi_estimate(self.unit_income, self.flat, 0.0, np.array([1.0])), (-1.0, 0.0))

    def test_annuity_with_constant_rate(self):
        market = MarketSpec.constant(rate=0.05, drift=0.05, volatility=0.2, horizon=1.0)
        value = varpi(self.unit_income, market, 0.0, np.array([1.0]))
        self.assertAlmostEqual(value, -(1.0 - np.exp(-0.05)) / 0.05, places=12)
        self.assertAlmostEqual(value, -0.975412, places=6)

    def test_tabulated_income_uses_quadrature(self):
        income = EndowmentModel(TabulatedRate([0.0, 1.0], [0.0, 2.0]), EndowmentKind.DETERMINISTIC)
        # epsilon(t) = 2 t, integral over [0.5, 1] is 0.75
        self.assertAlmostEqual(varpi(income, self.flat, 0.5, np.array([1.0])), -0.75, places=10)

    def test_vanishes_at_horizon(self):
        self.assertEqual(varpi(self.unit_income, self.flat, 1.0, np.array([1.0])), 0.0)
        estimator = VarPi(self.price_income(paths=10), self.flat)
        self.assertEqual(estimator(1.0, np.array([3.0])), 0.0)

    @hypothesis_settings(max_examples=40, deadline=None)
    @given(
        rate=st.floats(min_value=0.0, max_value=0.1),
        income=st.floats(min_value=0.0, max_value=5.0),
        t=st.floats(min_value=0.0, max_value=1.0),
    )
    def test_never_positive(self, rate, income, t):
        market = MarketSpec.constant(rate=rate, drift=rate + 0.02, volatility=0.2, horizon=1.0)
        model = EndowmentModel(ConstantRate(income), EndowmentKind.DETERMINISTIC)
        self.assertLessEqual(varpi(model, market, t, np.array([1.0])), 0.0)

    def test_closed_form_refused_for_price_dependent_income(self):
        with self.assertRaises(ValueError):
            VarPi(self.price_income(), self.flat, mode=VarPi.CLOSED_FORM)

    def test_negative_income_rejected(self):
        model = EndowmentModel(ConstantRate(-1.0), EndowmentKind.DETERMINISTIC)
        with self.assertRaises(DomainError):
            model.rate(0.0, np.ones((3, 1)))

    def test_price_income_is_linear_in_price(self):
        estimator = VarPi(self.price_income(), self.flat)
        value, error = estimator.estimate(0.0, np.array([1.0]))
        self.assertLessEqual(abs(value + 1.0), 3.0 * error)
        doubled, _ = estimator.estimate(0.0, np.array([2.0]))
        self.assertAlmostEqual(doubled, 2.0 * value, delta=1e-12)

    def test_cache_interpolates_estimates(self):
        estimator = VarPi(self.price_income(paths=500), self.flat)
        direct = estimator(0.25, np.array([1.1]))
        estimator.build_cache(np.linspace(0.0, 1.0, 5), [np.geomspace(0.5, 2.0, 9)])
        self.assertIsNotNone(estimator.interpolator)
        self.assertAlmostEqual(estimator(0.25, np.array([1.1])) / direct, 1.0, delta=1e-2)
        rows = estimator.at_prices(0.25, np.array([[1.1], [1.1]]))
        np.testing.assert_allclose(rows, estimator(0.25, np.array([1.1])), rtol=1e-12)

    def test_larger_income_has_lower_varpi(self):
        market = MarketSpec.constant(rate=0.03, drift=0.08, volatility=0.2, horizon=1.0)
        incomes = [
            ConstantRate(0.5), ConstantRate(1.0), TabulatedRate([0.0, 1.0], [1.0, 3.0]),
        ]
        for t in (0.0, 0.4, 0.9):
            values = [
                varpi(EndowmentModel(rate, EndowmentKind.DETERMINISTIC), market, t, np.array([1.0]))
                for rate in incomes
            ]
            self.assertTrue(values[0] > values[1] > values[2], msg=f"t={t}: {values}")

    def test_larger_price_income_has_lower_varpi(self):
        small = VarPi(self.price_income(paths=500), self.flat)
        large = VarPi(
            EndowmentModel(LinearInPriceRate(1, 2.0), EndowmentKind.MARKOV, mc_inner_paths=500, mc_seed=5, mc_steps=20),
            self.flat,
        )
        p = np.array([1.2])
        self.assertLess(large(0.3, p), small(0.3, p))


class MinimalWealthTests(BaseEndowmentTestCase):

    def test_zero_endowment_floor(self):
        bundle = simulate_paths(self.flat, self.grid, n_paths=5, seed=1)
        self.assertEqual(minimal_wealth(EndowmentModel.zero(), self.flat, bundle, 2, 4), 0.0)

    def test_floor_at_midpoint(self):
        bundle = simulate_paths(self.flat, self.grid, n_paths=5, seed=1)
        for path in range(bundle.n_paths):
            self.assertAlmostEqual(minimal_wealth(self.unit_income, self.flat, bundle, path, 5), -0.5, places=12)

    def test_floor_at_horizon(self):
        bundle = simulate_paths(self.flat, self.grid, n_paths=2, seed=1)
        self.assertEqual(minimal_wealth(self.unit_income, self.flat, bundle, 0, 10), 0.0)

    def test_floor_along_paths(self):
        bundle = simulate_paths(self.flat, self.grid, n_paths=3, seed=1)
        floor = VarPi(self.unit_income, self.flat).along_paths(bundle)
        self.assertEqual(floor.shape, (3, 11))
        np.testing.assert_allclose(floor, np.broadcast_to(-(1.0 - self.grid.times), (3, 11)), atol=1e-14)

    def test_cache_along_paths(self):
        bundle = simulate_paths(self.flat, self.grid, n_paths=20, seed=2)
        estimator = VarPi(self.price_income(paths=200), self.flat).cache_along(bundle)
        self.assertEqual(estimator.cache_shape, "11x9")
        self.assertIsNone(VarPi(self.unit_income, self.flat).cache_shape)


class FloorMartingaleTests(BaseEndowmentTestCase):

    def test_unit_income_in_flat_market_is_constant(self):
        bundle = simulate_paths(self.flat, self.grid, n_paths=5, seed=1)
        samples, allowance = floor_martingale(self.unit_income, self.flat, bundle)
        np.testing.assert_allclose(samples, -1.0, atol=1e-14)
        self.assertLess(allowance, 1e-14)

    def test_deterministic_deflator(self):
        # theta = 0 and r = 0.05: H is deterministic and only quadrature bias remains
        market = MarketSpec.constant(rate=0.05, drift=0.05, volatility=0.2, horizon=1.0)
        bundle = simulate_paths(market, self.grid, n_paths=1000, seed=1)
        samples, allowance = floor_martingale(self.unit_income, market, bundle)
        self.assertGreater(allowance, 0.0)
        report = martingale_test(samples, samples[0, 0], bundle.grid.times, atol=allowance)
        self.assertTrue(report.passed, msg=f"max z {report.max_z}")

    def test_random_deflator(self):
        market = MarketSpec.constant(rate=0.04, drift=0.10, volatility=0.3, horizon=1.0)
        bundle = simulate_paths(market, TimeGrid.uniform(0.0, 1.0, 50), n_paths=4000, seed=11)
        samples, allowance = floor_martingale(self.unit_income, market, bundle)
        self.assertGreater(np.std(samples[:, -1]), 0.0)
        report = martingale_test(samples, float(np.mean(samples[:, 0])), bundle.grid.times, atol=allowance)
        self.assertTrue(report.passed, msg=f"max z {report.max_z}")

    def test_wrong_floor_is_not_a_martingale(self):
        market = MarketSpec.constant(rate=0.05, drift=0.05, volatility=0.2, horizon=1.0)
        bundle = simulate_paths(market, self.grid, n_paths=1000, seed=1)
        halved = 0.5 * VarPi(self.unit_income, market).along_paths(bundle)
        samples, allowance = floor_martingale(self.unit_income, market, bundle, floor=halved)
        self.assertFalse(martingale_test(samples, samples[0, 0], atol=allowance).passed)


class PhiSensitivityTests(BaseEndowmentTestCase):

    def test_deterministic_income(self):
        phi = phi_sensitivities(self.unit_income, self.flat, 0.2, np.array([1.0]))
        np.testing.assert_array_equal(phi, np.zeros(2))

    def test_zero_endowment(self):
        phi = phi_sensitivities(EndowmentModel.zero(), self.flat, 0.2, None)
        np.testing.assert_array_equal(phi, np.zeros(2))

    def test_price_income_sensitivity(self):
        model = self.price_income()
        estimator = VarPi(model, self.flat)
        p = np.array([1.5])
        value, error = estimator.estimate(0.4, p)
        phi = phi_sensitivities(model, self.flat, 0.4, p, estimator)
        self.assertEqual(phi[0], 0.0)
        # varpi is linear in p, so p dvarpi/dp equals varpi itself under common random numbers
        self.assertAlmostEqual(phi[1], value, delta=1e-9)
        self.assertLessEqual(abs(phi[1] + 1.5 * 0.6), 3.0 * error)


class RateParsingTests(SimpleTestCase):

    def test_forms(self):
        self.assertIsInstance(parse_rate("constant:1"), ConstantRate)
        linear = parse_rate("linear_in:P2,0.5")
        self.assertEqual((linear.index, linear.coefficient), (2, 0.5))
        np.testing.assert_allclose(linear(0.0, np.array([[1.0, 4.0]])), [2.0])
        self.assertAlmostEqual(parse_rate("table:0:1,1:3")(0.5, np.ones((1, 1)))[0], 2.0, places=14)

    def test_bad_forms(self):
        for expression in ("linear_in:Q1,1", "linear_in:P0,1", "spline:1", "constant:x"):
            with self.assertRaises(ValueError, msg=expression):
                parse_rate(expression)

    def test_deterministic_kind_refuses_price_dependent_rate(self):
        with self.assertRaises(ValueError):
            EndowmentModel(LinearInPriceRate(1, 1.0), EndowmentKind.DETERMINISTIC)
