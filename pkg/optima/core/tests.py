import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from .exceptions import NoRiskPriceError, NonFiniteError
from .market import (
    MarketSpec, TimeGrid, bundle_from_csv, market_price_of_risk, restart_consistency_check, simulate_paths,
)


class BaseMarketTestCase(SimpleTestCase):
    """
    Base class for market tests.
    Provides builders for the constant-coefficient markets used throughout.
    """
    def setUp(self):
        super().setUp()
        # r = 0.04, excess 0.06, sigma 0.3 -> theta = 0.2
        self.market = MarketSpec.constant(rate=0.04, drift=0.10, volatility=0.3, horizon=1.0)
        self.grid = TimeGrid.uniform(0.0, 1.0, 100)

    def flat_market(self, rate=0.0, horizon=1.0):
        """Drift equal to the rate, so theta = 0."""
        return MarketSpec.constant(rate=rate, drift=rate, volatility=0.2, horizon=horizon)


class MarketPriceOfRiskTests(BaseMarketTestCase):

    def test_scalar_risk_price(self):
        market = MarketSpec.constant(rate=0.04, drift=0.09, volatility=0.30, dividend=0.01)
        theta = market_price_of_risk(market, 0.0, np.array([1.0]))
        self.assertAlmostEqual(theta[0], 0.2, places=14)

    def test_zero_excess_return_gives_zero_theta(self):
        market = MarketSpec.constant(rate=0.03, drift=[0.03, 0.03], volatility=[[0.2, 0.1], [0.0, 0.4]])
        theta = market_price_of_risk(market, 0.5, np.array([1.0, 2.0]))
        np.testing.assert_allclose(theta, 0.0, atol=1e-15)

    def test_minimum_norm_solution_with_more_noise_than_stocks(self):
        market = MarketSpec.constant(rate=0.0, drift=0.05, volatility=[[0.3, 0.4]])
        theta = market_price_of_risk(market, 0.0, np.array([1.0]))
        np.testing.assert_allclose(theta, [0.06, 0.08], rtol=1e-12)
        # kernel of sigma is spanned by (0.4, -0.3)
        self.assertAlmostEqual(float(theta @ np.array([0.4, -0.3])), 0.0, places=14)
        self.assertAlmostEqual(float(np.array([0.3, 0.4]) @ theta), 0.05, places=14)

    def test_inconsistent_system_is_reported(self):
        market = MarketSpec.constant(rate=0.0, drift=[0.05, 0.08], volatility=[[0.3], [0.3]])
        with self.assertRaises(NoRiskPriceError):
            market_price_of_risk(market, 0.0, np.array([1.0, 1.0]))

    def test_vectorised_call_matches_single_point(self):
        prices = np.array([[0.5], [1.0], [4.0]])
        theta = market_price_of_risk(self.market, 0.3, prices)
        self.assertEqual(theta.shape, (3, 1))
        np.testing.assert_allclose(theta[:, 0], 0.2, rtol=1e-14)

    @hypothesis_settings(max_examples=50, deadline=None)
    @given(
        excess=st.floats(min_value=-0.5, max_value=0.5),
        sigma=st.floats(min_value=0.05, max_value=2.0),
    )
    def test_risk_price_solves_the_system(self, excess, sigma):
        market = MarketSpec.constant(rate=0.02, drift=0.02 + excess, volatility=sigma)
        theta = market_price_of_risk(market, 0.0, np.array([1.0]))
        self.assertAlmostEqual(sigma * theta[0], excess, delta=1e-12)


class MarketSpecTests(BaseMarketTestCase):

    def test_initial_prices_must_have_bond_coordinate(self):
        with self.assertRaises(ValueError):
            MarketSpec.constant(rate=0.0, drift=0.1, volatility=0.2, initial_prices=[1.0])

    def test_smoke_test_flags_non_finite_coefficients(self):
        market = MarketSpec(
            n_stocks=1, n_brownian=1,
            rate_fn=lambda t, p: np.full(p.shape[0], np.nan),
            drift_fn=lambda t, p: np.full((p.shape[0], 1), 0.1),
            vol_fn=lambda t, p: np.full((p.shape[0], 1, 1), 0.2),
            dividend_fn=lambda t, p: np.zeros((p.shape[0], 1)),
            initial_prices=np.ones(2), horizon=1.0,
        )
        with self.assertRaises(NonFiniteError):
            market.smoke_test()

    def test_state_dependent_market_passes_smoke_test(self):
        # local volatility 0.2 + 0.1 / (1 + p)
        market = MarketSpec(
            n_stocks=1, n_brownian=1,
            rate_fn=lambda t, p: np.full(p.shape[0], 0.01),
            drift_fn=lambda t, p: np.full((p.shape[0], 1), 0.06),
            vol_fn=lambda t, p: (0.2 + 0.1 / (1.0 + p))[:, :, None],
            dividend_fn=lambda t, p: np.zeros((p.shape[0], 1)),
            initial_prices=np.ones(2), horizon=1.0,
        )
        market.smoke_test()
        bundle = simulate_paths(market, TimeGrid.uniform(0.0, 1.0, 20), n_paths=50, seed=1)
        self.assertTrue(np.all(bundle.prices > 0))


class SimulatePathsTests(BaseMarketTestCase):

    def test_flat_market_has_unit_deflator(self):
        bundle = simulate_paths(self.flat_market(), self.grid, n_paths=200, seed=3)
        np.testing.assert_array_equal(bundle.deflator, 1.0)

    def test_constant_rate_bond(self):
        market = self.flat_market(rate=0.05, horizon=2.0)
        bundle = simulate_paths(market, TimeGrid.uniform(0.0, 2.0, 40), n_paths=20, seed=0)
        np.testing.assert_allclose(bundle.bond[:, -1], np.exp(0.1), rtol=1e-12)
        self.assertAlmostEqual(float(bundle.bond[0, -1]), 1.105170918, places=9)

    def test_initial_node_and_deflator_identity(self):
        bundle = simulate_paths(self.market, self.grid, n_paths=100, seed=5)
        np.testing.assert_array_equal(bundle.bond[:, 0], 1.0)
        np.testing.assert_array_equal(bundle.expmart[:, 0], 1.0)
        np.testing.assert_array_equal(bundle.deflator[:, 0], 1.0)
        np.testing.assert_array_equal(bundle.prices[:, 0, 0], 1.0)
        np.testing.assert_array_equal(bundle.deflator, bundle.expmart / bundle.bond)
        self.assertTrue(np.all(bundle.prices > 0))

    def test_unit_mean_exponential_martingale(self):
        bundle = simulate_paths(self.market, self.grid, n_paths=100_000, seed=2024)
        terminal = bundle.expmart[:, -1]
        error = terminal.std(ddof=1) / np.sqrt(terminal.size)
        self.assertLessEqual(abs(terminal.mean() - 1.0), 3.0 * error)

    def test_same_seed_same_paths(self):
        first = simulate_paths(self.market, self.grid, n_paths=50, seed=9)
        second = simulate_paths(self.market, self.grid, n_paths=50, seed=9)
        np.testing.assert_array_equal(first.log_prices, second.log_prices)
        np.testing.assert_array_equal(first.deflator, second.deflator)

    def test_paths_do_not_depend_on_batch(self):
        whole = simulate_paths(self.market, self.grid, n_paths=40, seed=9)
        part = simulate_paths(self.market, self.grid, seed=9, path_ids=np.array([7, 31]))
        np.testing.assert_array_equal(part.log_prices, whole.log_prices[[7, 31]])

    def test_paths_do_not_depend_on_thread_count(self):
        single = simulate_paths(self.market, self.grid, n_paths=64, seed=4)
        with self.settings(OPTIMA_THREADS=4):
            threaded = simulate_paths(self.market, self.grid, n_paths=64, seed=4)
        np.testing.assert_array_equal(single.log_prices, threaded.log_prices)

    def test_grid_outside_horizon_rejected(self):
        with self.assertRaises(ValueError):
            simulate_paths(self.market, TimeGrid.uniform(0.0, 2.0, 10), n_paths=2)

    def test_csv_read_back_keeps_deflator(self):
        bundle = simulate_paths(self.market, TimeGrid.uniform(0.0, 1.0, 5), n_paths=3, seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "paths.csv"
            bundle.to_csv(path)
            restored = bundle_from_csv(path)
        np.testing.assert_array_equal(restored.deflator, bundle.deflator)
        np.testing.assert_array_equal(restored.grid.times, bundle.grid.times)
        self.assertIsNone(restored.theta)


class RestartConsistencyTests(BaseMarketTestCase):

    def test_split_at_midpoint(self):
        self.assertEqual(restart_consistency_check(self.market, self.grid, seed=1), 0.0)

    def test_split_at_first_node(self):
        self.assertEqual(restart_consistency_check(self.market, self.grid, seed=1, split_index=0), 0.0)

    def test_other_seed_is_detected(self):
        deviation = restart_consistency_check(self.market, self.grid, seed=1, other_seed=2)
        self.assertGreater(deviation, 0.0)
