import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from .endowment import ConstantRate, EndowmentKind, EndowmentModel, LinearInPriceRate, VarPi
from .exceptions import FloorRegion, NotHomogeneous, SingularCovariance
from .market import MarketSpec, TimeGrid, restart_paths, simulate_paths
from .optimizer import (
    FLOOR, INTERIOR, lagrange_multiplier, merton_fraction, optimal_consumption, optimal_portfolio, optimal_wealth,
    solve, strategy_objective, value_function,
)
from .preferences import ConstantWeight, LogPreference, PowerPreference, ProblemKind, capital_X
from .tests_preferences import mixed_preference

CONSUMPTION = ProblemKind.CONSUMPTION_ONLY
TERMINAL = ProblemKind.TERMINAL_ONLY


class BaseOptimizerTestCase(SimpleTestCase):
    """
    Base class for optimizer tests.
    ``self.market`` has excess return 0.04 and sigma 0.2 (Merton fraction 1);
    ``self.flat`` has r = 0 and theta = 0.
    """
    def setUp(self):
        super().setUp()
        self.one = ConstantWeight(1.0)
        self.zero = EndowmentModel.zero()
        self.market = MarketSpec.constant(rate=0.01, drift=0.05, volatility=0.2, horizon=2.0)
        self.flat = MarketSpec.constant(rate=0.0, drift=0.0, volatility=0.2, horizon=2.0)
        self.grid = TimeGrid.uniform(0.0, 2.0, 40)
        self.log_pref = LogPreference(self.one, 0.0, 2.0)

    def log_consumption(self, horizon=2.0):
        return LogPreference(self.one, 0.0, horizon)

    def power_consumption(self, alpha=0.5, horizon=1.0):
        return PowerPreference(alpha, self.one, 0.0, horizon)


class MultiplierAndValueTests(BaseOptimizerTestCase):

    def test_log_consumption_multiplier(self):
        self.assertAlmostEqual(lagrange_multiplier(self.log_pref, 0.0, 1.0, CONSUMPTION), 2.0, places=14)

    def test_multiplier_round_trip(self):
        pref = LogPreference(self.one, 1.0, 2.0)
        x = capital_X(pref, 0.0, 1.0)
        self.assertAlmostEqual(lagrange_multiplier(pref, 0.0, x, ProblemKind.BOTH), 1.0, places=14)

    def test_multiplier_with_income_floor(self):
        pref = self.log_consumption(horizon=1.0)
        self.assertAlmostEqual(lagrange_multiplier(pref, -1.0, 0.5, CONSUMPTION), 2.0 / 3.0, places=14)

    def test_multiplier_below_floor(self):
        with self.assertRaises(FloorRegion):
            lagrange_multiplier(self.log_pref, -1.0, -1.5, CONSUMPTION)

    def test_log_consumption_value(self):
        y = lagrange_multiplier(self.log_pref, 0.0, 1.0, CONSUMPTION)
        self.assertAlmostEqual(value_function(self.log_pref, CONSUMPTION, y), -1.386294, places=6)

    def test_log_consumption_value_regression(self):
        for x, horizon in ((1.0, 2.0), (2.0, 1.0), (0.5, 1.0)):
            pref = self.log_consumption(horizon)
            y = lagrange_multiplier(pref, 0.0, x, CONSUMPTION)
            self.assertAlmostEqual(value_function(pref, CONSUMPTION, y), horizon * np.log(x / horizon), delta=1e-6)

    def test_terminal_log_value(self):
        pref = LogPreference(self.one, 1.0, 1.0)
        y = lagrange_multiplier(pref, 0.0, 1.0, TERMINAL)
        self.assertAlmostEqual(y, 1.0, places=14)
        self.assertAlmostEqual(value_function(pref, TERMINAL, y), 0.0, places=14)

    def test_power_value(self):
        pref = self.power_consumption()
        y = lagrange_multiplier(pref, 0.0, 0.25, CONSUMPTION)
        self.assertAlmostEqual(y, 1.0, places=13)
        self.assertAlmostEqual(value_function(pref, CONSUMPTION, y), 0.5, places=13)

    @hypothesis_settings(max_examples=40, deadline=None)
    @given(x=st.floats(min_value=0.01, max_value=100.0))
    def test_doubling_wealth_adds_log_two(self, x):
        pref = self.log_consumption(horizon=1.5)
        value = value_function(pref, CONSUMPTION, lagrange_multiplier(pref, 0.0, x, CONSUMPTION))
        doubled = value_function(pref, CONSUMPTION, lagrange_multiplier(pref, 0.0, 2 * x, CONSUMPTION))
        self.assertAlmostEqual(doubled - value, 1.5 * np.log(2.0), delta=1e-10)


class SolutionPathTests(BaseOptimizerTestCase):

    def test_discounted_consumption_is_deterministic(self):
        bundle = simulate_paths(self.market, self.grid, n_paths=500, seed=2)
        solution = solve(self.market, self.log_pref, self.zero, CONSUMPTION, 1.0)
        _, consumption, _ = solution.pathwise(bundle, with_portfolio=False)
        discounted = bundle.deflator * consumption
        np.testing.assert_allclose(discounted, 0.5, rtol=1e-13)
        self.assertLessEqual(float(np.max(discounted.std(axis=0))), 1e-12)

    def test_power_discounted_consumption(self):
        market = MarketSpec.constant(rate=0.01, drift=0.05, volatility=0.2, horizon=1.0)
        bundle = simulate_paths(market, TimeGrid.uniform(0.0, 1.0, 20), n_paths=300, seed=2)
        solution = solve(market, self.power_consumption(), self.zero, CONSUMPTION, 0.25)
        _, consumption, _ = solution.pathwise(bundle, with_portfolio=False)
        discounted = bundle.deflator * consumption
        np.testing.assert_allclose(discounted, 0.25, rtol=1e-12)
        self.assertLessEqual(float(np.max(discounted.std(axis=0))), 1e-12)

    def test_wealth_on_flat_market(self):
        bundle = simulate_paths(self.flat, self.grid, n_paths=5, seed=1)
        solution = solve(self.flat, self.log_pref, self.zero, CONSUMPTION, 1.0)
        wealth, _, _ = solution.pathwise(bundle, with_portfolio=False)
        expected = np.broadcast_to(1.0 - self.grid.times / 2.0, wealth.shape)
        np.testing.assert_allclose(wealth, expected, atol=1e-14)

    def test_initial_and_terminal_wealth(self):
        bundle = simulate_paths(self.market, self.grid, n_paths=50, seed=3)
        solution = solve(self.market, self.log_pref, self.zero, CONSUMPTION, 1.0)
        wealth, _, _ = solution.pathwise(bundle, with_portfolio=False)
        np.testing.assert_allclose(wealth[:, 0], 1.0, rtol=1e-12)
        np.testing.assert_allclose(wealth[:, -1], 0.0, atol=1e-15)

    def test_terminal_log_wealth_is_x_after_discounting(self):
        pref = LogPreference(self.one, 1.0, 2.0)
        bundle = simulate_paths(self.market, self.grid, n_paths=100, seed=4)
        solution = solve(self.market, pref, self.zero, TERMINAL, 1.0)
        wealth, _, _ = solution.pathwise(bundle, with_portfolio=False)
        np.testing.assert_allclose(bundle.deflator[:, -1] * wealth[:, -1], 1.0, rtol=1e-12)

    def test_budget_process_is_constant(self):
        bundle = simulate_paths(self.market, self.grid, n_paths=200, seed=5)
        solution = solve(self.market, self.log_pref, self.zero, CONSUMPTION, 1.0)
        np.testing.assert_allclose(solution.budget_process(bundle), 1.0, rtol=1e-12)

    def test_two_wealth_forms_agree(self):
        income = EndowmentModel(ConstantRate(1.0), EndowmentKind.DETERMINISTIC)
        bundle = simulate_paths(self.market, self.grid, n_paths=20, seed=6)
        solution = solve(self.market, LogPreference(self.one, 1.0, 2.0), income, ProblemKind.BOTH, 1.0)
        k = 10
        t, deflator, prices = self.grid.times[k], bundle.deflator[:, k], bundle.prices[:, k]
        varpi = solution.estimator.at_prices(t, prices)
        np.testing.assert_allclose(
            solution.wealth(t, deflator, prices),
            solution.wealth(t, deflator, prices, conditional_endowment=deflator * varpi),
            rtol=1e-12,
        )

    def test_pathwise_table_columns(self):
        bundle = simulate_paths(self.market, self.grid, n_paths=30, seed=7)
        solution = solve(self.market, self.log_pref, self.zero, CONSUMPTION, 1.0)
        table = solution.pathwise_table(bundle)
        self.assertEqual(
            list(table.columns),
            ["t", "mean_wealth", "se_wealth", "mean_consumption", "se_consumption", "mean_pi_1", "se_pi_1"],
        )
        self.assertEqual(len(table), self.grid.times.size)


class PortfolioTests(BaseOptimizerTestCase):

    def test_merton_fraction_does_not_depend_on_family(self):
        market = MarketSpec.constant(rate=0.01, drift=0.05, volatility=0.2, horizon=1.0)
        bundle = simulate_paths(market, TimeGrid.uniform(0.0, 1.0, 10), n_paths=20, seed=8)
        prefs = [self.power_consumption(alpha) for alpha in (0.2, 0.5, 0.8)] + [self.log_consumption(1.0)]
        for pref in prefs:
            solution = solve(market, pref, self.zero, CONSUMPTION, 1.0)
            for k in range(10):
                deflator, prices = bundle.deflator[:, k], bundle.prices[:, k]
                ratio = solution.portfolio(market.horizon * k / 10, deflator, prices)[:, 0] / solution.wealth(
                    market.horizon * k / 10, deflator, prices
                )
                np.testing.assert_allclose(ratio, 1.0, atol=1e-12, err_msg=pref.family)

    def test_no_risk_premium_means_all_in_bond(self):
        income = EndowmentModel(ConstantRate(1.0), EndowmentKind.DETERMINISTIC)
        solution = solve(self.flat, self.log_pref, income, CONSUMPTION, 1.0)
        prices = np.array([[1.0], [1.3]])
        deflator = np.ones(2)
        np.testing.assert_array_equal(solution.portfolio(0.5, deflator, prices), 0.0)
        np.testing.assert_allclose(solution.bond_holding(0.5, deflator, prices), solution.wealth(0.5, deflator, prices))

    def test_hedging_demand_for_price_linked_income(self):
        market = MarketSpec.constant(rate=0.0, drift=0.0, volatility=0.2, horizon=1.0)
        income = EndowmentModel(LinearInPriceRate(1, 1.0), EndowmentKind.MARKOV, mc_inner_paths=4000, mc_steps=20)
        estimator = VarPi(income, market)
        solution = solve(market, self.log_consumption(1.0), income, CONSUMPTION, 1.0, estimator=estimator)
        _, error = estimator.estimate(0.0, np.array([1.0]))
        holding = solution.portfolio(0.0, np.ones(1), np.array([[1.0]]))[0, 0]
        self.assertLessEqual(abs(holding - 1.0), 3.0 * error)

    def test_single_node_helpers(self):
        deflator, prices = np.array([0.8, 1.25]), np.array([[0.9], [1.4]])
        solution = solve(self.market, self.log_pref, self.zero, CONSUMPTION, 1.0, start=0.5)
        args = (self.log_pref, self.market, self.zero, CONSUMPTION, 0.5, 1.0, 1.0, deflator, prices)
        np.testing.assert_array_equal(optimal_consumption(*args), solution.consumption(1.0, deflator))
        np.testing.assert_array_equal(optimal_wealth(*args), solution.wealth(1.0, deflator, prices))
        np.testing.assert_array_equal(optimal_portfolio(*args), solution.portfolio(1.0, deflator, prices))
        # H c = (x / (T - s)) on every node
        np.testing.assert_allclose(deflator * optimal_consumption(*args), 1.0 / 1.5, rtol=1e-14)

    def test_singular_covariance_rejected(self):
        market = MarketSpec.constant(rate=0.0, drift=[0.05, 0.05], volatility=[[0.2], [0.2]])
        with self.assertRaises(SingularCovariance):
            merton_fraction(market, 0.0, np.ones((1, 2)))


class SolveTests(BaseOptimizerTestCase):

    def test_interior_solution(self):
        solution = solve(self.market, self.log_pref, self.zero, CONSUMPTION, 1.0)
        self.assertEqual(solution.branch, INTERIOR)
        self.assertAlmostEqual(solution.y_multiplier, 2.0, places=14)
        self.assertEqual(solution.summary()["kind"], "consumption_only")

    def test_floor_branch(self):
        income = EndowmentModel(ConstantRate(1.0), EndowmentKind.DETERMINISTIC)
        solution = solve(self.flat, self.log_pref, income, CONSUMPTION, -2.5)
        self.assertEqual(solution.branch, FLOOR)
        self.assertEqual(solution.value, float("-inf"))
        self.assertEqual(solution.discounted_consumption(0.7), 0.0)
        self.assertEqual(solution.discounted_gap(0.3), solution.discounted_gap(1.9))
        self.assertAlmostEqual(solution.discounted_gap(0.3), -0.5, places=14)

    def test_mixed_preference_refused(self):
        market = MarketSpec.constant(rate=0.0, drift=0.05, volatility=0.2, horizon=1.0)
        with self.assertRaises(NotHomogeneous):
            solve(market, mixed_preference(), self.zero, CONSUMPTION, 1.0)

    def test_dynamic_consistency(self):
        bundle = simulate_paths(self.market, self.grid, n_paths=20, seed=9)
        solution = solve(self.market, self.log_pref, self.zero, CONSUMPTION, 1.0)
        k = self.grid.index_of(0.5)
        tail = restart_paths(self.market, bundle, k)
        np.testing.assert_allclose(bundle.deflator[:, k:], bundle.deflator[:, k:k + 1] * tail.deflator, rtol=1e-12)

        wealth, _, _ = solution.pathwise(bundle, with_portfolio=False)
        worst = 0.0
        for path in range(bundle.n_paths):
            resolved = solve(
                self.market, self.log_pref, self.zero, CONSUMPTION, wealth[path, k],
                p=bundle.prices[path, k], start=0.5,
            )
            for j, t in enumerate(tail.grid.times[:-1]):
                original = solution.discounted_consumption(t) / bundle.deflator[path, k + j]
                again = resolved.discounted_consumption(t) / tail.deflator[path, j]
                worst = max(worst, abs(again - original) / original)
        self.assertLessEqual(worst, 1e-8)


class StrategyObjectiveTests(BaseOptimizerTestCase):

    def test_optimal_plan_attains_value(self):
        times = TimeGrid.uniform(0.0, 2.0, 200).times
        solution = solve(self.market, self.log_pref, self.zero, CONSUMPTION, 1.0)
        plan = np.full((10, times.size), 0.5)
        mean, error = strategy_objective(self.log_pref, CONSUMPTION, times, discounted_consumption=plan)
        self.assertAlmostEqual(mean, solution.value, places=12)
        self.assertLess(error, 1e-14)

    def test_front_loaded_plan_is_worse(self):
        times = TimeGrid.uniform(0.0, 2.0, 400).times
        # discounted consumption 0.75 - 0.25 t also spends x = 1 over [0, 2]
        plan = np.broadcast_to(0.75 - 0.25 * times, (10, times.size))
        mean, _ = strategy_objective(self.log_pref, CONSUMPTION, times, discounted_consumption=plan)
        self.assertLess(mean, 2.0 * np.log(0.5) - 0.05)

    def test_saving_a_tenth_in_the_bond_is_worse(self):
        pref = LogPreference(self.one, 1.0, 2.0)
        solution = solve(self.market, pref, self.zero, ProblemKind.BOTH, 1.0)
        bundle = simulate_paths(self.market, self.grid, n_paths=4000, seed=9)
        wealth, consumption, _ = solution.pathwise(bundle, with_portfolio=False)
        times = bundle.grid.times
        optimal, _ = strategy_objective(
            pref, ProblemKind.BOTH, times, bundle.deflator * consumption, bundle.deflator[:, -1] * wealth[:, -1],
        )
        self.assertAlmostEqual(optimal, solution.value, places=10)

        # consume 90%, roll the rest forward at the bond rate into terminal wealth
        saved = bundle.bond[:, -1] * np.trapezoid(0.1 * consumption / bundle.bond, times, axis=1)
        mean, error = strategy_objective(
            pref, ProblemKind.BOTH, times,
            0.9 * bundle.deflator * consumption, bundle.deflator[:, -1] * (wealth[:, -1] + saved),
        )
        self.assertGreater(error, 0.0)
        self.assertLessEqual(mean, solution.value + 3.0 * error)
        self.assertLess(mean, solution.value)
