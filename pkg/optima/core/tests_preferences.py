from itertools import combinations_with_replacement

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from .exceptions import DomainError, UnsupportedFamily
from .preferences import (
    ConstantWeight, CustomPreference, LogPreference, LogUtility, PolynomialWeight, PowerPreference, PowerUtility,
    ProblemKind, RunningUtility, SeparablePreference, TabulatedWeight, capital_X, duality_gap,
    homogeneity_coefficients, invert_X, marginal_inverse_check, parse_weight, verify_homogeneity,
)

X_GRID = (0.1, 1.0, 10.0, 100.0)


def mixed_preference(horizon=1.0):
    """Log utility before T/2 and 2 sqrt(x) after: not homogeneous."""
    switch = 0.5 * horizon
    return CustomPreference(
        U1=lambda t, x: np.log(x) if t < switch else 2.0 * np.sqrt(x),
        U2=lambda x: 0.0,
        I1=lambda t, y: 1.0 / y if t < switch else y ** -2.0,
        I2=lambda y: 0.0,
        horizon=horizon,
        bequest=False,
        breakpoints=(switch,),
    )


class BasePreferenceTestCase(SimpleTestCase):
    """
    Base class for preference tests.
    Builds one instance of each closed-form family on T = 1.
    """
    def setUp(self):
        super().setUp()
        self.one = ConstantWeight(1.0)
        self.log_with_bequest = LogPreference(self.one, 1.0, 1.0)
        self.log_consumption = LogPreference(self.one, 0.0, 1.0)
        self.power_consumption = PowerPreference(0.5, self.one, 0.0, 1.0)
        self.families = [
            LogPreference(PolynomialWeight([1.0, 0.5]), 2.0, 1.0),
            PowerPreference(0.3, TabulatedWeight([0.0, 0.5, 1.0], [1.0, 2.0, 1.5]), 1.0, 1.0),
            SeparablePreference(LogUtility(), ConstantWeight(2.0), 1.0, 1.0),
            SeparablePreference(PowerUtility(0.5), PolynomialWeight([1.0, 1.0]), 0.5, 1.0),
        ]


class CapitalXTests(BasePreferenceTestCase):

    def test_log_family_demand(self):
        self.assertAlmostEqual(capital_X(self.log_with_bequest, 0.0, 2.0), 1.0, places=14)

    def test_demand_at_horizon_is_terminal_inverse(self):
        for pref in self.families:
            self.assertAlmostEqual(capital_X(pref, 1.0, 0.7), pref.I2(0.7), places=12)

    def test_power_family_demand(self):
        self.assertAlmostEqual(capital_X(self.power_consumption, 0.0, 1.0), 0.25, places=14)

    def test_kind_selects_the_parts(self):
        pref = self.log_with_bequest
        y = 4.0
        self.assertAlmostEqual(capital_X(pref, 0.0, y, ProblemKind.CONSUMPTION_ONLY), 0.25, places=14)
        self.assertAlmostEqual(capital_X(pref, 0.0, y, ProblemKind.TERMINAL_ONLY), 0.25, places=14)
        self.assertAlmostEqual(capital_X(pref, 0.0, y, ProblemKind.BOTH), 0.5, places=14)

    def test_nonpositive_multiplier_rejected(self):
        with self.assertRaises(DomainError):
            capital_X(self.log_with_bequest, 0.0, 0.0)

    def test_time_outside_horizon_rejected(self):
        with self.assertRaises(DomainError):
            capital_X(self.log_with_bequest, 1.5, 1.0)

    def test_quadrature_matches_closed_form(self):
        custom = CustomPreference(
            U1=lambda t, x: (1.0 + 0.5 * t) * np.log(x), U2=lambda x: 2.0 * np.log(x),
            I1=lambda t, y: (1.0 + 0.5 * t) / y, I2=lambda y: 2.0 / y, horizon=1.0,
        )
        closed = self.families[0]
        for y in (0.01, 1.0, 50.0):
            self.assertAlmostEqual(capital_X(custom, 0.2, y) / capital_X(closed, 0.2, y), 1.0, delta=1e-9)

    def test_demand_strictly_decreasing(self):
        y_grid = np.logspace(-3, 3, 25)
        for pref in self.families:
            for t in np.linspace(0.0, 1.0, 5):
                demand = np.array([capital_X(pref, t, y) for y in y_grid])
                self.assertTrue(np.all(np.diff(demand) < 0), msg=f"{pref.family} t={t}")
        custom = mixed_preference()
        for t in (0.0, 0.3, 0.6, 0.9):
            demand = np.array([capital_X(custom, t, y, ProblemKind.CONSUMPTION_ONLY) for y in y_grid])
            self.assertTrue(np.all(np.diff(demand) < 0), msg=f"custom t={t}")


class InvertXTests(BasePreferenceTestCase):

    def test_log_family_inverse(self):
        self.assertAlmostEqual(invert_X(self.log_with_bequest, 0.0, 4.0), 0.5, places=14)

    def test_power_family_inverse(self):
        self.assertAlmostEqual(invert_X(self.power_consumption, 0.0, 0.25), 1.0, places=13)

    def test_round_trip(self):
        for pref in self.families + [mixed_preference()]:
            for y in (1e-3, 1.0, 1e3):
                back = invert_X(pref, 0.25, capital_X(pref, 0.25, y))
                self.assertAlmostEqual(back / y, 1.0, delta=1e-9, msg=pref.family)

    @hypothesis_settings(max_examples=60, deadline=None)
    @given(log_y=st.floats(min_value=np.log(1e-3), max_value=np.log(1e3)), t=st.floats(min_value=0.0, max_value=0.9))
    def test_round_trip_property(self, log_y, t):
        y = float(np.exp(log_y))
        for pref in self.families:
            back = invert_X(pref, t, capital_X(pref, t, y))
            self.assertAlmostEqual(back / y, 1.0, delta=1e-9)

    def test_nonpositive_wealth_rejected(self):
        with self.assertRaises(DomainError):
            invert_X(self.log_with_bequest, 0.0, -1.0)

    def test_consumption_only_has_no_inverse_at_horizon(self):
        with self.assertRaises(DomainError):
            invert_X(self.log_consumption, 1.0, 1.0, ProblemKind.CONSUMPTION_ONLY)


class HomogeneityTests(BasePreferenceTestCase):

    def test_log_coefficients(self):
        coefficients = homogeneity_coefficients(self.log_consumption, 0.0, 0.5)
        self.assertAlmostEqual(coefficients.alpha_st, 2.0, places=14)

    def test_equal_times_give_unit_coefficient(self):
        for pref in self.families:
            self.assertAlmostEqual(homogeneity_coefficients(pref, 0.3, 0.3).alpha_st, 1.0, places=14)

    def test_running_coefficient(self):
        coefficients = homogeneity_coefficients(self.log_consumption, 0.0, 0.0)
        self.assertAlmostEqual(coefficients.alpha_I_t, 1.0, places=14)

    def test_composition_law(self):
        times = (0.0, 0.25, 0.5, 0.75, 1.0)
        for pref in self.families:
            for s, middle, t in combinations_with_replacement(times, 3):
                composed = (
                    homogeneity_coefficients(pref, s, middle).alpha_st * homogeneity_coefficients(pref, middle, t).alpha_st
                )
                direct = homogeneity_coefficients(pref, s, t).alpha_st
                self.assertAlmostEqual(composed / direct, 1.0, delta=1e-12, msg=f"{pref.family} {s} {middle} {t}")

    def test_running_coefficient_maps_wealth_to_consumption(self):
        for pref in self.families:
            for s in (0.0, 0.25, 0.5, 0.75):
                alpha_I = homogeneity_coefficients(pref, s, s).alpha_I_t
                for t in (s, 0.5 * (s + 1.0), 1.0):
                    alpha = homogeneity_coefficients(pref, s, t).alpha_st
                    for x in X_GRID:
                        consumption = pref.I1(s, invert_X(pref, t, x / alpha))
                        self.assertAlmostEqual(
                            consumption / (alpha_I * x), 1.0, delta=1e-12, msg=f"{pref.family} {s} {t}",
                        )

    def test_families_are_homogeneous(self):
        for pref in self.families:
            for kind in ProblemKind:
                deviation = verify_homogeneity(pref, 0.0, 0.5, X_GRID, kind)
                self.assertLessEqual(deviation, 1e-9, msg=f"{pref.family} {kind.value}")

    def test_equal_times_give_zero_deviation(self):
        self.assertLessEqual(verify_homogeneity(self.families[1], 0.4, 0.4, X_GRID), 1e-12)

    def test_mixed_preference_is_not_homogeneous(self):
        self.assertGreater(verify_homogeneity(mixed_preference(), 0.0, 0.5, X_GRID), 1e-6)

    def test_custom_family_has_no_closed_form_coefficients(self):
        with self.assertRaises(UnsupportedFamily):
            homogeneity_coefficients(mixed_preference(), 0.0, 0.5)

    def test_decreasing_times_rejected(self):
        with self.assertRaises(DomainError):
            homogeneity_coefficients(self.log_consumption, 0.6, 0.5)


class DualityTests(BasePreferenceTestCase):

    def test_log_at_unit_multiplier(self):
        gap = duality_gap(LogUtility(), 1.0, np.linspace(0.5, 1.5, 101))
        self.assertLessEqual(gap, 1e-12)
        self.assertGreater(gap, -1e-12)

    def test_square_root_utility(self):
        # PowerUtility(0.5) is 2 sqrt(x)
        gap = duality_gap(PowerUtility(0.5), 1.0, np.linspace(0.1, 3.0, 30))
        self.assertLessEqual(gap, 1e-12)

    def test_log_at_large_multiplier(self):
        gap = duality_gap(LogUtility(), 10.0, np.array([0.05, 0.1, 0.2]))
        self.assertAlmostEqual(gap, 0.0, places=12)

    @hypothesis_settings(max_examples=50, deadline=None)
    @given(y=st.floats(min_value=1e-2, max_value=1e2), t=st.floats(min_value=0.0, max_value=1.0))
    def test_gap_never_positive(self, y, t):
        for pref in self.families:
            utility = RunningUtility(pref, t)
            grid = np.geomspace(1e-3, 1e3, 200)
            self.assertLessEqual(duality_gap(utility, y, grid), 1e-12)

    def test_marginal_inverse(self):
        for pref in self.families:
            self.assertLessEqual(marginal_inverse_check(pref, 0.3, (0.1, 1.0, 10.0)), 1e-7, msg=pref.family)

    def test_utilities_increasing_and_concave(self):
        grid = np.geomspace(0.01, 100.0, 50)
        for pref in self.families:
            values = np.array([pref.U1(0.5, x) for x in grid])
            self.assertTrue(np.all(np.diff(values) > 0), msg=pref.family)
            slopes = np.diff(values) / np.diff(grid)
            self.assertTrue(np.all(np.diff(slopes) < 0), msg=pref.family)


class WeightFunctionTests(SimpleTestCase):

    def test_parse_forms(self):
        self.assertEqual(parse_weight("constant:2")(0.3), 2.0)
        self.assertAlmostEqual(parse_weight("poly:1,2")(0.5), 2.0, places=14)
        self.assertAlmostEqual(parse_weight("table:0:1,1:3")(0.25), 1.5, places=14)

    def test_unknown_form_rejected(self):
        with self.assertRaises(ValueError):
            parse_weight("exp:1")

    def test_nonpositive_weight_rejected(self):
        with self.assertRaises(DomainError):
            LogPreference(parse_weight("poly:1,-2"), 0.0, 1.0)
