"""
Closed-form optimal wealth, consumption and portfolio for utility from
consumption, from terminal wealth, or from both, under a homogeneous state
preference structure.

The objective values discounted arguments U1(t, H c) and U2(H X_T); as a
consequence the optimal discounted consumption H c = I1(t, Y) is the same
on every path.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy import integrate

from .defaults import solver_default
from .endowment import VarPi, phi_sensitivities
from .exceptions import DomainError, FloorRegion, NotHomogeneous, SingularCovariance
from .preferences import ProblemKind, capital_X, invert_X, verify_homogeneity

logger = logging.getLogger(__name__)

INTERIOR = "interior"
FLOOR = "floor"

HOMOGENEITY_GRID = (0.1, 1.0, 10.0, 100.0)


def lagrange_multiplier(pref, varpi_val, x, kind, t=0.0):
    """Y(t, x, p) = X^(-1)(t, x - varpi) for the kind's demand function."""
    if x <= varpi_val:
        raise FloorRegion(f"x={x} does not exceed the endowment floor {varpi_val}.")
    return invert_X(pref, t, x - varpi_val, kind)


def value_function(pref, kind, y, s=0.0):
    """G(s, y), G1 or G2 depending on kind; may be -inf."""
    if not y > 0:
        raise DomainError(f"y must be positive, got {y}.")
    return pref.value_G(s, y, ProblemKind(kind))


def floor_value(pref, kind, gap, s=0.0):
    """
    Objective of the floor branch: zero consumption and discounted terminal
    wealth max(gap, 0). Uses the extension U(0) = U(0+), so -inf for log.
    """
    kind = ProblemKind(kind)
    total = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind.has_running and s < pref.horizon:
            at_zero = pref.U1(0.5 * (s + pref.horizon), 0.0)
            if not np.isfinite(at_zero):
                return float("-inf")
            running, _ = integrate.quad(lambda t: pref.U1(t, 0.0), s, pref.horizon)
            total += running
        if pref.terminal_active(kind):
            total += pref.U2(max(gap, 0.0))
    return float(total) if np.isfinite(total) else float("-inf")


def merton_fraction(market, t, p):
    """
    (sigma sigma')^(-1) (b + delta - r 1_n) at (t, p) for p of shape (m, n);
    returns (m, n) (leading axis 1 for state-free markets).
    """
    r, b, sigma, delta = market.coefficients(t, np.atleast_2d(p))
    covariance = sigma @ np.swapaxes(sigma, -1, -2)
    condition = np.linalg.cond(covariance)
    if not np.all(np.isfinite(condition)) or np.max(condition) > solver_default("cond_max"):
        raise SingularCovariance(f"cond(sigma sigma') = {np.max(condition):.3e} at t={t}.")
    try:
        factor = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"sigma sigma' is not positive definite at t={t}.") from exc
    excess = (b + delta - r[:, None])[..., None]
    half = np.linalg.solve(factor, excess)
    return np.linalg.solve(np.swapaxes(factor, -1, -2), half)[..., 0]


@dataclass(frozen=True, eq=False)
class Solution:
    pref: object
    market: object
    estimator: VarPi
    kind: ProblemKind
    x: float
    start: float
    initial_prices: np.ndarray
    varpi0: float
    y_multiplier: Optional[float]
    value: float
    branch: str

    @property
    def endowment(self):
        return self.estimator.model

    def _varpi(self, t, prices):
        return self.estimator.at_prices(t, prices)

    def discounted_consumption(self, t):
        """H(s,t) c(s,t): I1(t, Y) in the interior, 0 on the floor or without running utility."""
        if self.branch == FLOOR or not self.kind.has_running:
            return 0.0
        return float(self.pref.I1(t, self.y_multiplier))

    def discounted_gap(self, t):
        """The deterministic part X(t, Y) (interior) or x - varpi0 (floor) of H xi - Pi."""
        if self.branch == FLOOR:
            return self.x - self.varpi0
        return capital_X(self.pref, t, self.y_multiplier, self.kind)

    def wealth(self, t, deflator, prices, conditional_endowment=None):
        """
        xi(s, t) for nodes with deflator H(s,t) (m,) and prices P(s,t) (m, n).
        Default form: varpi(t, P) + H^(-1) gap. With ``conditional_endowment``
        = Pi(s, t, p) given, the H^(-1) (Pi + gap) form is used instead.
        """
        deflator = np.atleast_1d(np.asarray(deflator, dtype=float))
        gap = self.discounted_gap(t)
        if conditional_endowment is not None:
            return (np.asarray(conditional_endowment, dtype=float) + gap) / deflator
        return self._varpi(t, prices) + gap / deflator

    def consumption(self, t, deflator, prices=None):
        deflator = np.atleast_1d(np.asarray(deflator, dtype=float))
        return self.discounted_consumption(t) / deflator

    def portfolio(self, t, deflator, prices):
        """
        Wealth held in each stock, shape (m, n):
        (xi + varpi + phi_0) M - (phi_1..phi_n) with M the Merton fraction;
        M xi when varpi is deterministic.
        """
        prices = np.atleast_2d(np.asarray(prices, dtype=float))
        xi = self.wealth(t, deflator, prices)
        fraction = merton_fraction(self.market, t, prices)
        if not self.estimator.price_dependent:
            return fraction * xi[:, None]
        varpi = self._varpi(t, prices)
        phi = np.array([phi_sensitivities(self.endowment, self.market, t, row, self.estimator) for row in prices])
        return fraction * (xi + varpi + phi[:, 0])[:, None] - phi[:, 1:]

    def bond_holding(self, t, deflator, prices):
        """pi_0 = xi - pi' 1_n"""
        return self.wealth(t, deflator, prices) - self.portfolio(t, deflator, prices).sum(axis=1)

    def pathwise(self, bundle, with_portfolio=True):
        """xi, c and (optionally) pi at every node of ``bundle`` (which must start at s)."""
        times = bundle.grid.times
        prices = bundle.prices
        wealth = np.empty((bundle.n_paths, times.size))
        consumption = np.empty_like(wealth)
        portfolio = np.empty((bundle.n_paths, times.size, self.market.n_stocks)) if with_portfolio else None
        for k, t in enumerate(times):
            deflator = bundle.deflator[:, k]
            wealth[:, k] = self.wealth(t, deflator, prices[:, k])
            consumption[:, k] = self.consumption(t, deflator)
            if with_portfolio:
                portfolio[:, k] = self.portfolio(t, deflator, prices[:, k])
        return wealth, consumption, portfolio

    def budget_process(self, bundle, wealth=None, consumption=None):
        """
        Y(s, t) = H xi + int_s^t H (c - epsilon) du, a martingale with mean x
        for the optimal strategy. Without an explicit ``consumption`` the
        optimal discounted consumption is integrated exactly as the drop in
        the running part of X; income, and any consumption passed in, use the
        trapezoid rule on the bundle grid.
        """
        if wealth is None:
            wealth, _, _ = self.pathwise(bundle, with_portfolio=False)
        times = bundle.grid.times
        income = np.stack([self.endowment.rate(t, bundle.prices[:, k]) for k, t in enumerate(times)], axis=1)
        if consumption is None:
            consumed = np.zeros(times.size)
            if self.branch == INTERIOR and self.kind.has_running:
                running = ProblemKind.CONSUMPTION_ONLY
                consumed = np.array([
                    capital_X(self.pref, times[0], self.y_multiplier, running)
                    - capital_X(self.pref, t, self.y_multiplier, running) for t in times
                ])
            flow = -bundle.deflator * income
            accumulated = consumed + integrate.cumulative_trapezoid(flow, times, axis=1, initial=0.0)
        else:
            flow = bundle.deflator * (consumption - income)
            accumulated = integrate.cumulative_trapezoid(flow, times, axis=1, initial=0.0)
        return bundle.deflator * wealth + accumulated

    def pathwise_table(self, bundle):
        """Per-time means and standard errors of xi, c and pi_i."""
        wealth, consumption, portfolio = self.pathwise(bundle)
        root_m = np.sqrt(bundle.n_paths)

        def stats(samples):
            samples = np.ascontiguousarray(samples.T)
            error = samples.std(axis=1, ddof=1) / root_m if bundle.n_paths > 1 else np.zeros(samples.shape[0])
            return samples.mean(axis=1), error

        table = {"t": bundle.grid.times}
        table["mean_wealth"], table["se_wealth"] = stats(wealth)
        table["mean_consumption"], table["se_consumption"] = stats(consumption)
        for i in range(self.market.n_stocks):
            table[f"mean_pi_{i + 1}"], table[f"se_pi_{i + 1}"] = stats(portfolio[:, :, i])
        return pd.DataFrame(table)

    def summary(self):
        return {
            "x": self.x,
            "Y": self.y_multiplier,
            "V": self.value,
            "branch": self.branch,
            "kind": self.kind.value,
            "start": self.start,
            "varpi0": self.varpi0,
        }


def homogeneity_gate(pref, kind, start=0.0, tolerance=None):
    """Largest homogeneity deviation over a few (s, t) pairs in [start, T)."""
    tolerance = solver_default("homogeneity_tol") if tolerance is None else tolerance
    T = pref.horizon
    kind = ProblemKind(kind)
    span = T - start
    pairs = [(start, start + 0.5 * span), (start + 0.25 * span, start + 0.75 * span), (start, start)]
    if kind is ProblemKind.TERMINAL_ONLY:
        pairs.append((start, T))
    deviation = max(verify_homogeneity(pref, s, t, HOMOGENEITY_GRID, kind) for s, t in pairs)
    if deviation > tolerance:
        raise NotHomogeneous(
            f"{pref.family} preference deviates from homogeneity by {deviation:.3e} (> {tolerance:.1e})."
        )
    return deviation


def solve(market, pref, endowment, kind, x, p=None, config=None, start=0.0, estimator=None):
    """
    Assemble the optimal Solution on [start, T] for initial wealth x and
    initial stock prices p. Below the floor the zero-consumption branch is
    returned instead of raising.
    """
    config = config or {}
    kind = ProblemKind(kind)
    p = market.stock_prices if p is None else np.asarray(p, dtype=float).ravel()
    if p.size == market.n_stocks + 1:
        p = p[1:]
    if abs(pref.horizon - market.horizon) > 1e-12:
        raise DomainError(f"Preference horizon {pref.horizon} differs from market horizon {market.horizon}.")
    if not 0.0 <= start < market.horizon:
        raise DomainError(f"start={start} must lie in [0, T).")

    homogeneity_gate(pref, kind, start, config.get("homogeneity_tol"))
    estimator = estimator or VarPi(endowment, market, mode=config.get("varpi_mode"))
    varpi0 = estimator(start, p)

    try:
        y = lagrange_multiplier(pref, varpi0, x, kind, start)
    except FloorRegion:
        value = floor_value(pref, kind, x - varpi0, start)
        logger.info(f"x={x} is at or below the floor varpi={varpi0}; returning the floor branch (V={value}).")
        return Solution(pref, market, estimator, kind, float(x), float(start), p, float(varpi0), None, value, FLOOR)

    value = value_function(pref, kind, y, start)
    logger.info(f"Solved {kind.value} for {pref.family} preference: x={x}, varpi={varpi0}, Y={y}, V={value}")
    return Solution(pref, market, estimator, kind, float(x), float(start), p, float(varpi0), y, value, INTERIOR)


def optimal_consumption(pref, market, endowment, kind, s, t, x, deflator, prices, p=None):
    """
    c(s, t) at nodes with deflator H(s,t) and prices P(s,t), for a plan
    started at s with wealth x and stock prices p. Solves afresh on each
    call; keep the Solution from ``solve`` when evaluating many nodes.
    """
    return solve(market, pref, endowment, kind, x, p=p, start=s).consumption(t, deflator, prices)


def optimal_wealth(pref, market, endowment, kind, s, t, x, deflator, prices, p=None):
    return solve(market, pref, endowment, kind, x, p=p, start=s).wealth(t, deflator, prices)


def optimal_portfolio(pref, market, endowment, kind, s, t, x, deflator, prices, p=None):
    return solve(market, pref, endowment, kind, x, p=p, start=s).portfolio(t, deflator, prices)


def strategy_objective(pref, kind, times, discounted_consumption=None, discounted_terminal=None):
    """
    Monte Carlo objective of an arbitrary strategy from its discounted
    consumption (n_paths, n_times) and discounted terminal wealth (n_paths,).
    Returns (mean, standard error).
    """
    kind = ProblemKind(kind)
    times = np.asarray(times, dtype=float)
    per_path = None
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind.has_running and discounted_consumption is not None:
            utilities = np.stack([pref.U1(t, discounted_consumption[:, k]) for k, t in enumerate(times)], axis=1)
            per_path = np.trapezoid(utilities, times, axis=1)
        if pref.terminal_active(kind) and discounted_terminal is not None:
            terminal = np.asarray(pref.U2(np.asarray(discounted_terminal, dtype=float)), dtype=float)
            per_path = terminal if per_path is None else per_path + terminal
    if per_path is None:
        return 0.0, 0.0
    per_path = np.broadcast_to(per_path, (np.atleast_1d(per_path).size,))
    error = float(np.std(per_path, ddof=1) / np.sqrt(per_path.size)) if per_path.size > 1 else 0.0
    return float(np.mean(per_path)), error
