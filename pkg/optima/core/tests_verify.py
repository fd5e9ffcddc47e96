import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from .endowment import ConstantRate, EndowmentKind, EndowmentModel, LinearInPriceRate, VarPi
from .exceptions import DomainError, VerificationError
from .market import MarketSpec, TimeGrid, simulate_paths
from .preferences import ConstantWeight, LogPreference, PowerPreference, ProblemKind, invert_X
from .optimizer import value_function
from .verify import (
    BinomialMarket, binomial_oracle, existence_construction, feasibility_check, martingale_test,
    nested_floor_check, nested_floor_estimate, node_program_oracle, oracle_check, preference_checks, run_diagnostics,
    supermartingale_test, violation_drift,
)

CONSUMPTION = ProblemKind.CONSUMPTION_ONLY


class BaseVerifyTestCase(SimpleTestCase):
    """
    Base class for diagnostic tests.
    ``symmetric_samples`` returns noise whose column means are exactly the reference.
    """
    def setUp(self):
        super().setUp()
        self.one = ConstantWeight(1.0)
        self.tree = BinomialMarket(2, 1.2, 0.9)

    def symmetric_samples(self, reference=1.0, paths=2000, columns=5, seed=0):
        noise = np.random.default_rng(seed).standard_normal((paths // 2, columns))
        return reference + np.concatenate([noise, -noise])

    def log_consumption(self, horizon=1.0):
        return LogPreference(self.one, 0.0, horizon)


class MartingaleTestTests(BaseVerifyTestCase):

    def test_centred_samples_pass(self):
        report = martingale_test(self.symmetric_samples(), 1.0)
        self.assertTrue(report.passed)
        self.assertLess(report.max_z, 1e-6)

    def test_biased_samples_fail(self):
        report = martingale_test(self.symmetric_samples() + 0.2, 1.0)
        self.assertFalse(report.passed)
        self.assertGreater(report.max_z, report.z_crit)

    def test_deterministic_process(self):
        constant = np.full((1000, 4), 1.5)
        self.assertTrue(martingale_test(constant, 1.5).passed)
        self.assertFalse(martingale_test(constant, 1.5 + 1e-6).passed)

    def test_report_carries_times(self):
        report = martingale_test(self.symmetric_samples(columns=3), 1.0, times=[0.0, 0.5, 1.0])
        np.testing.assert_array_equal(report.times, [0.0, 0.5, 1.0])
        self.assertEqual(report.direction, "two-sided")

    def test_supermartingale_direction(self):
        times = np.linspace(0.0, 1.0, 6)
        decreasing = np.broadcast_to(1.0 - 0.1 * times, (1000, 6))
        self.assertTrue(supermartingale_test(decreasing, "super").passed)
        self.assertFalse(supermartingale_test(decreasing, "sub").passed)

    def test_money_injection_breaks_supermartingale(self):
        times = np.linspace(0.0, 1.0, 6)
        injected = self.symmetric_samples(columns=6) + 0.5 * times
        self.assertFalse(supermartingale_test(injected, "super").passed)

    def test_unknown_direction_rejected(self):
        with self.assertRaises(ValueError):
            supermartingale_test(np.ones((10, 2)), "sideways")

    def test_violation_drift_beats_the_noise(self):
        samples = self.symmetric_samples(columns=6)
        times = np.linspace(0.0, 1.0, 6)
        # a fixed 0.01 t drift hides in noise of standard error ~0.02
        self.assertTrue(martingale_test(samples + 0.01 * times, 1.0, times).passed)
        drift = violation_drift(samples, times)
        self.assertEqual(drift[0], 0.0)
        report = martingale_test(samples + drift, 1.0, times)
        self.assertFalse(report.passed)
        self.assertGreater(report.max_z, 2.0 * report.z_crit)

    def test_violation_drift_on_deterministic_process(self):
        times = np.linspace(0.0, 2.0, 5)
        drift = violation_drift(np.ones((1000, 5)), times)
        np.testing.assert_allclose(drift, 0.005 * times, atol=1e-12)

    def test_tolerance_absorbs_known_bias(self):
        constant = np.full((1000, 4), 1.5 + 1e-6)
        self.assertFalse(martingale_test(constant, 1.5).passed)
        self.assertTrue(martingale_test(constant, 1.5, atol=2e-6).passed)


class BinomialMarketTests(BaseVerifyTestCase):

    def test_guards(self):
        for kwargs in (
            {"n_periods": 5, "up": 1.2, "down": 0.9},
            {"n_periods": 0, "up": 1.2, "down": 0.9},
            {"n_periods": 2, "up": 1.2, "down": 1.05},
            {"n_periods": 2, "up": 1.2, "down": 0.9, "p_up": 1.0},
        ):
            with self.assertRaises(DomainError, msg=str(kwargs)):
                BinomialMarket(**kwargs)

    def test_state_prices_reprice_bond_and_stock(self):
        tree = BinomialMarket(3, 1.2, 0.9, rate=0.05, horizon=1.5, p_up=0.6)
        self.assertLess(tree.pricing_error(), 1e-14)

    def test_deflator_has_unit_discounted_mean(self):
        tree = BinomialMarket(4, 1.1, 0.95, rate=0.02, p_up=0.3)
        for k in range(5):
            self.assertAlmostEqual(tree.probabilities(k) @ tree.deflator(k) * tree.growth ** k, 1.0, places=14)


class BinomialOracleTests(BaseVerifyTestCase):

    def test_log_value_at_unit_ratio(self):
        value, plan = binomial_oracle(self.tree, self.log_consumption(), 1.0, CONSUMPTION)
        self.assertAlmostEqual(value, 0.0, places=12)
        self.assertAlmostEqual(plan["y"], 1.0, places=12)
        np.testing.assert_allclose(plan["discounted_consumption"], 1.0, rtol=1e-12)

    def test_doubling_wealth_adds_log_two(self):
        pref = self.log_consumption()
        value, _ = binomial_oracle(self.tree, pref, 1.0, CONSUMPTION)
        doubled, _ = binomial_oracle(self.tree, pref, 2.0, CONSUMPTION)
        self.assertAlmostEqual(doubled - value, np.log(2.0), places=12)

    def test_matches_closed_form_solver(self):
        prefs = [
            (LogPreference(self.one, 1.0, 1.0), ProblemKind.BOTH, 1.0),
            (PowerPreference(0.5, self.one, 0.0, 1.0), CONSUMPTION, 0.25),
        ]
        for pref, kind, x in prefs:
            for n_periods in (1, 2, 4):
                row = oracle_check(pref, kind, x, n_periods=n_periods)
                self.assertTrue(row.passed, msg=row.detail)
                self.assertLessEqual(row.statistic, 1e-8)

    @hypothesis_settings(max_examples=25, deadline=None)
    @given(x=st.floats(min_value=0.05, max_value=20.0), n_periods=st.integers(min_value=1, max_value=4))
    def test_oracle_value_equals_solver_value(self, x, n_periods):
        pref = LogPreference(self.one, 0.5, 1.0)
        tree = BinomialMarket(n_periods, 1.15, 0.9, rate=0.01)
        oracle_value, _ = binomial_oracle(tree, pref, x, ProblemKind.BOTH)
        solver_value = value_function(pref, ProblemKind.BOTH, invert_X(pref, 0.0, x, ProblemKind.BOTH))
        self.assertAlmostEqual(oracle_value, solver_value, delta=1e-8)

    def test_terminal_wealth_is_undiscounted(self):
        pref = LogPreference(self.one, 1.0, 1.0)
        _, plan = binomial_oracle(self.tree, pref, 1.0, ProblemKind.TERMINAL_ONLY)
        np.testing.assert_allclose(plan["terminal_wealth"] * self.tree.deflator(2), plan["discounted_terminal"])

    def test_node_program_agrees(self):
        pref = self.log_consumption()
        oracle_value, plan = binomial_oracle(self.tree, pref, 1.0, CONSUMPTION)
        program_value, program = node_program_oracle(self.tree, pref, 1.0, CONSUMPTION)
        self.assertAlmostEqual(program_value, oracle_value, delta=1e-6)
        for k, discounted in enumerate(program["discounted"]):
            np.testing.assert_allclose(discounted, plan["discounted_consumption"][k], rtol=1e-4)


class ConstructionTests(BaseVerifyTestCase):

    def setUp(self):
        super().setUp()
        self.flat = MarketSpec.constant(rate=0.0, drift=0.0, volatility=0.2, horizon=1.0)
        self.market = MarketSpec.constant(rate=0.03, drift=0.08, volatility=0.25, horizon=1.0)
        self.grid = TimeGrid.uniform(0.0, 1.0, 10)

    def test_wealth_equals_floor_when_starting_on_it(self):
        floor = np.broadcast_to(-(1.0 - self.grid.times), (50, 11))
        bundle = simulate_paths(self.market, self.grid, n_paths=50, seed=1)
        wealth = existence_construction(floor, -1.0, bundle.deflator)
        np.testing.assert_array_equal(wealth, floor)

    def test_zero_floor_gives_inverse_deflator(self):
        bundle = simulate_paths(self.market, self.grid, n_paths=50, seed=1)
        wealth = existence_construction(np.zeros((50, 11)), 1.0, bundle.deflator)
        np.testing.assert_allclose(wealth, 1.0 / bundle.deflator, rtol=1e-14)

    def test_drifting_floor_martingale_rejected(self):
        drifting = np.broadcast_to(0.1 * self.grid.times, (1000, 11))
        with self.assertRaises(VerificationError):
            existence_construction(np.zeros((1000, 11)), 1.0, np.ones((1000, 11)), floor_martingale=drifting)

    def test_nested_estimate_of_unit_income(self):
        model = EndowmentModel(ConstantRate(1.0), EndowmentKind.DETERMINISTIC, mc_inner_paths=50, mc_steps=10)
        bundle = simulate_paths(self.flat, self.grid, n_paths=3, seed=1)
        estimate, error = nested_floor_estimate(model, self.flat, bundle, 1, 5)
        self.assertAlmostEqual(estimate, -0.5, places=12)
        self.assertLess(error, 1e-12)
        self.assertEqual(nested_floor_estimate(model, self.flat, bundle, 1, 10), (0.0, 0.0))

    def price_income(self, coefficient=1.0, paths=2000):
        return EndowmentModel(
            LinearInPriceRate(1, coefficient), EndowmentKind.MARKOV, mc_inner_paths=paths, mc_seed=4, mc_steps=10,
        )

    def test_nested_check_with_price_income(self):
        model = self.price_income()
        bundle = simulate_paths(self.flat, self.grid, n_paths=40, seed=2)
        row = nested_floor_check(model, self.flat, bundle, n_pairs=20, seed=1)
        self.assertEqual(row.name, "nested_floor")
        self.assertIn("20 pairs", row.detail)
        self.assertEqual(row.threshold, 3.5)
        self.assertTrue(row.passed, msg=row.detail)

    def test_nested_check_rejects_a_wrong_estimator(self):
        bundle = simulate_paths(self.flat, self.grid, n_paths=40, seed=2)
        doubled = VarPi(self.price_income(coefficient=2.0), self.flat)
        row = nested_floor_check(self.price_income(), self.flat, bundle, estimator=doubled, n_pairs=20, seed=1)
        self.assertFalse(row.passed)
        self.assertGreater(row.statistic, 10.0)

    def test_nested_check_with_unit_income(self):
        model = EndowmentModel(ConstantRate(1.0), EndowmentKind.DETERMINISTIC, mc_inner_paths=50, mc_steps=10)
        bundle = simulate_paths(self.flat, self.grid, n_paths=3, seed=1)
        row = nested_floor_check(model, self.flat, bundle, n_pairs=25, seed=3)
        self.assertTrue(row.passed, msg=row.detail)
        self.assertIn("25 pairs", row.detail)

    def test_feasibility(self):
        times = np.linspace(0.0, 2.0, 21)
        deflator = np.ones((100, 21))
        floor = np.zeros((100, 21))
        income = np.zeros((100, 21))
        self.assertTrue(feasibility_check(1.0, deflator, floor, np.full((100, 21), 0.5), income, times).passed)
        overspent = feasibility_check(1.0, deflator, floor, np.full((100, 21), 0.6), income, times)
        self.assertFalse(overspent.passed)
        self.assertAlmostEqual(overspent.statistic, 0.2, places=12)


class DiagnosticSuiteTests(BaseVerifyTestCase):

    def setUp(self):
        super().setUp()
        self.market = MarketSpec.constant(rate=0.04, drift=0.10, volatility=0.3, horizon=2.0)
        self.grid = TimeGrid.uniform(0.0, 2.0, 20)
        self.pref = self.log_consumption(horizon=2.0)

    def run_suite(self, **kwargs):
        rows = run_diagnostics(
            self.market, self.pref, EndowmentModel.zero(), CONSUMPTION, 1.0, self.grid,
            n_paths=2000, seed=7, **kwargs,
        )
        return {row.name: row for row in rows}

    def test_log_configuration_passes(self):
        rows = self.run_suite()
        for name in (
            "deflator_identity", "positivity", "restart_consistency", "homogeneity", "solve",
            "budget_martingale", "budget_supermartingale", "negative_control", "initial_wealth",
            "deterministic_discounted_consumption", "floor_respect", "merton_fraction",
            "feasibility_bound", "floor_martingale", "existence_construction", "binomial_oracle",
        ):
            self.assertIn(name, rows)
            self.assertTrue(rows[name].passed, msg=f"{name}: {rows[name].detail}")

    def test_injected_violation_fails(self):
        rows = self.run_suite(inject_violation=True)
        self.assertFalse(rows["budget_martingale"].passed)
        self.assertTrue(rows["negative_control"].passed)

    def test_preference_rows(self):
        rows = {row.name: row for row in preference_checks(self.pref, CONSUMPTION, 2.0)}
        self.assertEqual(set(rows), {"homogeneity", "marginal_inverse", "inversion_round_trip", "duality_gap"})
        self.assertTrue(all(row.passed for row in rows.values()))

    def test_income_floor_rows(self):
        income = EndowmentModel(ConstantRate(0.5), EndowmentKind.DETERMINISTIC)
        pref = LogPreference(self.one, 1.0, 2.0)
        rows = run_diagnostics(self.market, pref, income, ProblemKind.BOTH, 1.0, self.grid, n_paths=1000, seed=3)
        rows = {row.name: row for row in rows}
        self.assertNotIn("binomial_oracle", rows)
        self.assertNotIn("nested_floor", rows)
        for name in (
            "budget_martingale", "floor_respect", "feasibility_bound", "floor_martingale", "existence_construction",
        ):
            self.assertTrue(rows[name].passed, msg=f"{name}: {rows[name].detail}")

    def test_price_income_controls(self):
        flat = MarketSpec.constant(rate=0.0, drift=0.0, volatility=0.2, horizon=1.0)
        income = EndowmentModel(
            LinearInPriceRate(1, 1.0), EndowmentKind.MARKOV, mc_inner_paths=500, mc_seed=0, mc_steps=10,
        )
        pref = LogPreference(self.one, 1.0, 1.0)
        rows = run_diagnostics(
            flat, pref, income, ProblemKind.BOTH, 1.0, TimeGrid.uniform(0.0, 1.0, 20), n_paths=1000, seed=3,
        )
        rows = {row.name: row for row in rows}
        self.assertIn("20 pairs", rows["nested_floor"].detail)
        self.assertIn("floor_martingale", rows)
        # the budget process is random here, so the control drift must exceed 0.01
        self.assertTrue(rows["negative_control"].passed, msg=rows["negative_control"].detail)
        self.assertGreater(rows["negative_control"].statistic, rows["negative_control"].threshold)
