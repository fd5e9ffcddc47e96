"""
Independent oracles and statistical diagnostics: martingale and
supermartingale tests, the binomial multiplier oracle and a full per-node
program on small trees, the wealth construction above a floor, and the
nested estimate of the conditional endowment value.
"""
import logging
from dataclasses import dataclass
from math import comb

import numpy as np
from scipy import optimize

from .defaults import solver_default
from .endowment import EndowmentKind, VarPi, floor_martingale
from .exceptions import ConvergenceError, DomainError, OptimaError, VerificationError
from .market import TimeGrid, restart_consistency_check, simulate_paths
from .optimizer import HOMOGENEITY_GRID, INTERIOR, merton_fraction, solve, value_function
from .preferences import (
    ConstantWeight, ProblemKind, RunningUtility, capital_X, duality_gap, invert_X, marginal_inverse_check,
    verify_homogeneity,
)

logger = logging.getLogger(__name__)

MAX_BINOMIAL_PERIODS = 4
PASS = "pass"
FAIL = "fail"


@dataclass(frozen=True, eq=False)
class MartingaleReport:
    times: np.ndarray
    means: np.ndarray
    std_errors: np.ndarray
    reference: float
    max_z: float
    verdict: str
    z_crit: float
    direction: str = "two-sided"

    @property
    def passed(self):
        return self.verdict == PASS


@dataclass(frozen=True)
class CheckResult:
    name: str
    statistic: float
    threshold: float
    passed: bool
    detail: str = ""

    @property
    def verdict(self):
        return PASS if self.passed else FAIL


def _time_statistics(samples):
    """Per-column mean and standard error; rows are paths. Means use numpy's pairwise sum."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    by_time = np.ascontiguousarray(samples.T)
    m = by_time.shape[1]
    means = by_time.mean(axis=1)
    errors = by_time.std(axis=1, ddof=1) / np.sqrt(m) if m > 1 else np.zeros(by_time.shape[0])
    return means, errors


def _z_scores(deviation, errors, scale):
    # rounding floor: a deterministic process has SE ~ 1e-17
    floor = 1e-12 * max(1.0, abs(scale))
    return deviation / np.maximum(errors, floor)


def _warn_if_small(samples, what):
    paths = np.asarray(samples).shape[0]
    minimum = solver_default("min_test_paths")
    if paths < minimum:
        logger.warning(f"{what} on {paths} paths (< {minimum}); the verdict has little power.")


def martingale_test(samples, reference, times=None, z_crit=None, atol=0.0):
    """
    Two-sided z test that every column of ``samples`` has mean ``reference``.
    Deviations up to ``atol`` (a known quadrature bias) are not counted.
    """
    z_crit = solver_default("z_crit") if z_crit is None else z_crit
    _warn_if_small(samples, "Martingale test")
    means, errors = _time_statistics(samples)
    deviation = np.maximum(np.abs(means - reference) - atol, 0.0)
    z = _z_scores(deviation, errors, reference)
    max_z = float(np.max(z))
    times = np.arange(means.size, dtype=float) if times is None else np.asarray(times, dtype=float)
    return MartingaleReport(times, means, errors, float(reference), max_z, PASS if max_z <= z_crit else FAIL, z_crit)


def supermartingale_test(samples, direction="super", times=None, z_crit=None):
    """
    One-sided z test on increments from the first column: a supermartingale
    may not drift up by more than z_crit standard errors ("sub" flips sign).
    """
    if direction not in ("super", "sub"):
        raise ValueError("direction must be 'super' or 'sub'.")
    z_crit = solver_default("z_crit") if z_crit is None else z_crit
    _warn_if_small(samples, "Supermartingale test")
    samples = np.asarray(samples, dtype=float)
    means, _ = _time_statistics(samples)
    drift, errors = _time_statistics(samples - samples[:, :1])
    sign = 1.0 if direction == "super" else -1.0
    z = _z_scores(sign * drift, errors, means[0])
    max_z = float(np.max(z[1:])) if z.size > 1 else 0.0
    times = np.arange(means.size, dtype=float) if times is None else np.asarray(times, dtype=float)
    verdict = PASS if max_z <= z_crit else FAIL
    return MartingaleReport(times, means, errors, float(means[0]), max_z, verdict, z_crit, direction=direction)


# --- binomial oracle ---

@dataclass(frozen=True)
class BinomialMarket:
    """Recombining one-stock binomial tree with a bond; complete and arbitrage free."""
    n_periods: int
    up: float
    down: float
    rate: float = 0.0
    horizon: float = 1.0
    p_up: float = 0.5
    initial_price: float = 1.0

    def __post_init__(self):
        if not 1 <= self.n_periods <= MAX_BINOMIAL_PERIODS:
            raise DomainError(f"Binomial oracle handles 1..{MAX_BINOMIAL_PERIODS} periods, got {self.n_periods}.")
        if not 0.0 < self.p_up < 1.0:
            raise DomainError("p_up must lie in (0, 1).")
        if not self.down < self.growth < self.up:
            raise DomainError(f"Need down < exp(r dt) < up for no arbitrage (down={self.down}, up={self.up}).")

    @property
    def dt(self):
        return self.horizon / self.n_periods

    @property
    def growth(self):
        return float(np.exp(self.rate * self.horizon / self.n_periods))

    @property
    def q(self):
        """Risk-neutral up probability."""
        return (self.growth - self.down) / (self.up - self.down)

    @property
    def times(self):
        return np.arange(self.n_periods) * self.dt

    def probabilities(self, k):
        """Physical probabilities of the k+1 nodes after k periods (by number of ups)."""
        return np.array([comb(k, j) * self.p_up ** j * (1 - self.p_up) ** (k - j) for j in range(k + 1)])

    def deflator(self, k):
        """State price density at the nodes after k periods."""
        j = np.arange(k + 1)
        likelihood = (self.q / self.p_up) ** j * ((1 - self.q) / (1 - self.p_up)) ** (k - j)
        return likelihood / self.growth ** k

    def state_prices(self):
        """Arrow-Debreu prices of the terminal nodes."""
        n = self.n_periods
        return np.array([comb(n, j) * self.q ** j * (1 - self.q) ** (n - j) for j in range(n + 1)]) / self.growth ** n

    def stock_prices(self, k):
        j = np.arange(k + 1)
        return self.initial_price * self.up ** j * self.down ** (k - j)

    def pricing_error(self):
        """Largest mispricing of the bond and the stock by the state prices."""
        prices = self.state_prices()
        bond = abs(prices.sum() * self.growth ** self.n_periods - 1.0)
        stock = abs(prices @ self.stock_prices(self.n_periods) - self.initial_price) / self.initial_price
        return float(max(bond, stock))


def _discrete_demand(pref, market, y, kind):
    total = 0.0
    if kind.has_running:
        total += market.dt * sum(pref.I1(t, y) for t in market.times)
    if pref.terminal_active(kind):
        total += pref.I2(y)
    return float(total)


def binomial_oracle(market, pref, x, kind=ProblemKind.BOTH):
    """
    Static Lagrangian on the tree: find y with sum_k dt I1(t_k, y) + I2(y) = x,
    then H c = I1(t_k, y) at every node. Returns (value, plan).
    """
    kind = ProblemKind(kind)
    if not x > 0:
        raise DomainError(f"x must be positive, got {x}.")
    target = np.log(x)

    def gap(log_y):
        return np.log(_discrete_demand(pref, market, float(np.exp(log_y)), kind)) - target

    lo, hi = -1.0, 1.0
    for _ in range(60):
        if gap(lo) > 0 > gap(hi):
            break
        lo, hi = lo - 1.0, hi + 1.0
    else:
        raise ConvergenceError(f"No multiplier bracket for x={x} on the tree.")
    try:
        root, result = optimize.brentq(
            gap, lo, hi, xtol=1e-15, maxiter=solver_default("max_iter"), full_output=True, disp=False,
        )
    except (RuntimeError, ValueError) as exc:
        raise ConvergenceError(f"Tree multiplier search failed: {exc}") from exc
    if not result.converged:
        raise ConvergenceError("Tree multiplier search did not converge.")
    y = float(np.exp(root))

    value = 0.0
    discounted_consumption = np.zeros(market.n_periods)
    consumption = []
    if kind.has_running:
        discounted_consumption = np.array([pref.I1(t, y) for t in market.times])
        value += market.dt * sum(pref.U1(t, z) for t, z in zip(market.times, discounted_consumption))
        consumption = [discounted_consumption[k] / market.deflator(k) for k in range(market.n_periods)]
    discounted_terminal = pref.I2(y) if pref.terminal_active(kind) else 0.0
    if pref.terminal_active(kind):
        value += pref.U2(discounted_terminal)
    plan = {
        "y": y,
        "times": market.times,
        "discounted_consumption": discounted_consumption,
        "consumption": consumption,
        "discounted_terminal": discounted_terminal,
        "terminal_wealth": discounted_terminal / market.deflator(market.n_periods),
    }
    return float(value), plan


def node_program_oracle(market, pref, x, kind=ProblemKind.BOTH):
    """
    The same problem written over every node with consumption in undiscounted
    units, solved by SLSQP. Agreement with ``binomial_oracle`` confirms the
    collapse of the discounted problem to a single multiplier.
    """
    kind = ProblemKind(kind)
    blocks = []  # (time or None for terminal, probabilities, deflators, weight)
    if kind.has_running:
        for k, t in enumerate(market.times):
            blocks.append((t, market.probabilities(k), market.deflator(k), market.dt))
    if pref.terminal_active(kind):
        n = market.n_periods
        blocks.append((None, market.probabilities(n), market.deflator(n), 1.0))
    sizes = [b[1].size for b in blocks]
    offsets = np.cumsum([0] + sizes)

    def split(v):
        return [v[offsets[i]:offsets[i + 1]] for i in range(len(blocks))]

    def objective(v):
        total = 0.0
        for (t, prob, deflator, weight), c in zip(blocks, split(v)):
            utility = pref.U2(deflator * c) if t is None else pref.U1(t, deflator * c)
            total += weight * prob @ utility
        return -total

    budget_row = np.concatenate([weight * prob * deflator for (_, prob, deflator, weight) in blocks])
    guess = np.concatenate([np.full(b[1].size, x / budget_row.sum()) for b in blocks])
    result = optimize.minimize(
        objective, guess, method="SLSQP",
        bounds=[(1e-12, None)] * guess.size,
        constraints=[{"type": "eq", "fun": lambda v: budget_row @ v - x, "jac": lambda v: budget_row}],
        options={"ftol": 1e-15, "maxiter": 1000},
    )
    if not result.success:
        raise ConvergenceError(f"Node program failed: {result.message}")
    discounted = [deflator * c for (_, _, deflator, _), c in zip(blocks, split(result.x))]
    return float(-result.fun), {"discounted": discounted}


# --- constructions on simulated paths ---

def existence_construction(floor, x, deflator, floor_martingale=None, z_crit=None, atol=0.0):
    """
    Wealth X = L + (x - L(s,s)) H^(-1) above a floor L. When
    ``floor_martingale`` samples (H L - int H eps) are given they are tested
    first. Raises VerificationError if X falls below L although x >= L(s,s).
    """
    floor = np.asarray(floor, dtype=float)
    deflator = np.asarray(deflator, dtype=float)
    if floor_martingale is not None:
        reference = float(np.mean(np.asarray(floor_martingale)[:, 0]))
        report = martingale_test(floor_martingale, reference, z_crit=z_crit, atol=atol)
        if not report.passed:
            raise VerificationError(f"H L - int H eps is not a martingale (max z {report.max_z:.2f}).")
    start = floor[:, :1]
    wealth = floor + (x - start) / deflator
    if np.all(x >= start) and np.any(wealth - floor < -1e-12 * max(1.0, abs(x))):
        raise VerificationError("Constructed wealth fell below the floor.")
    return wealth


def nested_floor_estimate(model, market, bundle, path_index, node_index, n_inner=None, seed=None):
    """
    Direct estimate of -E[int_t^T H(s,u) eps du | F_(s,t)] / H(s,t) at one node,
    from fresh continuation paths. Returns (estimate, standard error).
    """
    t, h_node, prices = bundle.node(path_index, node_index)
    if t >= market.horizon - 1e-12:
        return 0.0, 0.0
    n_inner = model.mc_inner_paths if n_inner is None else n_inner
    seed = (model.mc_seed + 1 + path_index * 7919 + node_index) if seed is None else seed
    grid = TimeGrid.uniform(t, market.horizon, model.mc_steps)
    inner = simulate_paths(market, grid, prices, n_inner, seed)
    integrand = np.stack(
        [h_node * inner.deflator[:, k] * model.rate(u, inner.prices[:, k]) for k, u in enumerate(grid.times)], axis=1,
    )
    per_path = -np.trapezoid(integrand, grid.times, axis=1) / h_node
    return float(per_path.mean()), float(per_path.std(ddof=1) / np.sqrt(per_path.size))


def nested_floor_check(model, market, bundle, estimator=None, n_pairs=20, seed=0, z_crit=None):
    """
    varpi(t, P) against the nested estimate at ``n_pairs`` random (path, node)
    pairs with t < T. The statistic is the largest z score over the pairs.
    """
    z_crit = solver_default("z_crit") if z_crit is None else z_crit
    estimator = estimator or VarPi(model, market)
    rng = np.random.default_rng(seed)
    paths = rng.integers(bundle.n_paths, size=n_pairs)
    nodes = rng.integers(bundle.grid.n_steps, size=n_pairs)
    worst, worst_at = 0.0, None
    for path, node in zip(paths.tolist(), nodes.tolist()):
        t, _, prices = bundle.node(path, node)
        direct, direct_se = estimator.estimate(t, prices)
        nested, nested_se = nested_floor_estimate(model, market, bundle, path, node)
        z = abs(direct - nested) / max(np.hypot(direct_se, nested_se), 1e-12 * max(1.0, abs(direct)))
        if worst_at is None or z > worst:
            worst, worst_at = float(z), (path, node)
    return _bound("nested_floor", worst, z_crit, f"{n_pairs} pairs; largest z at (path, node) {worst_at}")


def feasibility_check(x, deflator, floor, consumption, income, times, z_crit=None):
    """
    Admissibility bound x >= E[H_T L_T + int H (c - eps) du], allowing
    z_crit standard errors of slack.
    """
    deflator = np.asarray(deflator, dtype=float)
    flow = np.trapezoid(deflator * (np.asarray(consumption) - np.asarray(income)), times, axis=1)
    return feasibility_bound(x, deflator[:, -1] * np.asarray(floor)[:, -1] + flow, z_crit)


def feasibility_bound(x, samples, z_crit=None):
    """The same bound from per-path samples of H_T L_T + int H (c - eps)."""
    z_crit = solver_default("z_crit") if z_crit is None else z_crit
    samples = np.asarray(samples, dtype=float)
    mean = float(samples.mean())
    error = float(samples.std(ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
    slack = z_crit * max(error, 1e-12 * max(1.0, abs(x)))
    return CheckResult(
        name="feasibility_bound",
        statistic=mean - x,
        threshold=slack,
        passed=mean - x <= slack,
        detail=f"E[H_T L_T + int H(c - eps)] = {mean!r} (SE {error!r})",
    )


# --- the diagnostic suite ---

def _bound(name, statistic, threshold, detail=""):
    statistic = float(statistic)
    return CheckResult(name, statistic, float(threshold), bool(statistic <= threshold), detail)


def _from_report(name, report, detail=""):
    return CheckResult(name, report.max_z, report.z_crit, report.passed, detail)


def _guarded(name, check):
    """Run one check; a solver exception turns into a failed row instead of aborting the suite."""
    try:
        return check()
    except OptimaError as exc:
        logger.error(f"Check {name} raised: {exc}", exc_info=True)
        return CheckResult(name, float("nan"), float("nan"), False, f"{type(exc).__name__}: {exc}")


def violation_drift(samples, times, z_crit=None):
    """
    Drift ramping from 0 at the first time to 2 z_crit standard errors of
    ``samples`` plus 0.01 at the last. Added to a process that passes
    ``martingale_test`` it always makes the test fail.
    """
    z_crit = solver_default("z_crit") if z_crit is None else z_crit
    _, errors = _time_statistics(samples)
    times = np.asarray(times, dtype=float)
    ramp = (times - times[0]) / (times[-1] - times[0])
    return (2.0 * z_crit * float(np.max(errors)) + 0.01) * ramp


def preference_checks(pref, kind, horizon, homogeneity_tol=1e-9):
    """Homogeneity, marginal inverse, X round trip and duality rows."""
    kind = ProblemKind(kind)
    rows = [
        _guarded("homogeneity", lambda: _bound(
            "homogeneity", verify_homogeneity(pref, 0.0, 0.5 * horizon, HOMOGENEITY_GRID, kind), homogeneity_tol,
        )),
    ]
    if kind.has_running:
        rows.append(_guarded("marginal_inverse", lambda: _bound(
            "marginal_inverse", marginal_inverse_check(pref, 0.0, (0.1, 1.0, 10.0)), 1e-7,
        )))

    def round_trip():
        worst = 0.0
        for y in np.logspace(-3, 3, 13):
            back = invert_X(pref, 0.0, capital_X(pref, 0.0, y, kind), kind)
            worst = max(worst, abs(back - y) / y)
        return _bound("inversion_round_trip", worst, 1e-9)

    rows.append(_guarded("inversion_round_trip", round_trip))

    def duality():
        worst = -np.inf
        if kind.has_running:
            for t in (0.0, 0.5 * horizon):
                utility = RunningUtility(pref, t)
                for y in (0.1, 1.0, 10.0):
                    grid = utility.inverse_marginal(y) * np.logspace(-3, 3, 61)
                    worst = max(worst, duality_gap(utility, y, grid))
        return _bound("duality_gap", worst if np.isfinite(worst) else 0.0, 1e-12)

    rows.append(_guarded("duality_gap", duality))
    return rows


def oracle_check(pref, kind, x, n_periods=2, up=1.2, down=0.9, rate=0.0, p_up=0.5):
    """
    |V_solver - V_oracle| on a binomial tree. Only meaningful for a constant
    weight h, where the left-endpoint sum equals the time integral.
    """
    tree = BinomialMarket(n_periods, up, down, rate, pref.horizon, p_up)
    oracle_value, _ = binomial_oracle(tree, pref, x, kind)
    solver_value = value_function(pref, kind, invert_X(pref, 0.0, x, kind))
    return _bound(
        "binomial_oracle",
        abs(solver_value - oracle_value),
        1e-8,
        f"V_solver={solver_value!r} V_oracle={oracle_value!r} ({n_periods} periods)",
    )


def run_diagnostics(market, pref, endowment, kind, x, grid, n_paths=1000, seed=0, bundle=None,
                    estimator=None, inject_violation=False, z_crit=None, homogeneity_tol=1e-9):
    """
    The full check table for one configuration. ``inject_violation`` adds
    ``violation_drift`` to the budget process, which must then fail.
    """
    kind = ProblemKind(kind)
    z_crit = solver_default("z_crit") if z_crit is None else z_crit
    simulated = bundle is None
    if simulated:
        bundle = simulate_paths(market, grid, None, n_paths, seed)
    times = bundle.grid.times
    rows = []

    # market
    identity = np.max(np.abs(bundle.deflator - bundle.expmart / bundle.bond) / bundle.deflator)
    rows.append(_bound("deflator_identity", identity, 1e-12))
    nonpositive = sum(int(np.count_nonzero(np.asarray(a) <= 0))
                      for a in (bundle.prices, bundle.bond, bundle.expmart, bundle.deflator))
    rows.append(_bound("positivity", nonpositive, 0, "count of nonpositive P, B, Z, H entries"))
    rows.append(_from_report("unit_mean_expmart", martingale_test(bundle.expmart, 1.0, times, z_crit)))
    if simulated:
        rows.append(_guarded("restart_consistency", lambda: _bound(
            "restart_consistency", restart_consistency_check(market, bundle.grid, None, seed, min(16, n_paths)), 0.0,
        )))

    rows.extend(preference_checks(pref, kind, market.horizon, homogeneity_tol))

    estimator = estimator or VarPi(endowment, market)
    if estimator.price_dependent:
        if estimator.interpolator is None:
            estimator.cache_along(bundle)
        rows.append(_guarded("nested_floor", lambda: nested_floor_check(
            endowment, market, bundle, estimator, seed=seed, z_crit=z_crit,
        )))

    try:
        solution = solve(market, pref, endowment, kind, x, estimator=estimator)
    except OptimaError as exc:
        logger.error(f"Solve failed during diagnostics: {exc}", exc_info=True)
        rows.append(CheckResult("solve", float("nan"), float("nan"), False, f"{type(exc).__name__}: {exc}"))
        return rows
    rows.append(CheckResult("solve", solution.value, float("nan"), True, f"branch={solution.branch}"))

    with_portfolio = not estimator.price_dependent
    wealth, consumption, portfolio = solution.pathwise(bundle, with_portfolio=with_portfolio)
    floor = estimator.along_paths(bundle)
    honest = solution.budget_process(bundle, wealth)
    drift = violation_drift(honest, times, z_crit)
    budget = honest + drift if inject_violation else honest
    rows.append(_from_report("budget_martingale", martingale_test(budget, x, times, z_crit)))
    rows.append(_from_report("budget_supermartingale", supermartingale_test(budget, "super", times, z_crit)))

    control = martingale_test(honest + drift, x, times, z_crit)
    rows.append(CheckResult(
        "negative_control", control.max_z, z_crit, not control.passed, f"budget plus a drift of {drift[-1]!r} must fail",
    ))

    if solution.branch == INTERIOR:
        rows.append(_bound("initial_wealth", np.max(np.abs(wealth[:, 0] - x)), 1e-9 * max(1.0, abs(x))))
        if kind.has_running:
            discounted = bundle.deflator * consumption
            spread = np.max(discounted.std(axis=0))
            rows.append(_bound(
                "deterministic_discounted_consumption", spread, 1e-12 * max(1.0, float(np.max(discounted))),
            ))
        rows.append(_bound("floor_respect", -np.min(wealth - floor), 1e-12 * max(1.0, abs(x))))

    if endowment.kind is EndowmentKind.ZERO and portfolio is not None:
        worst = 0.0
        for k, t in enumerate(times):
            held = wealth[:, k] > 0
            if not held.any():
                continue
            fraction = merton_fraction(market, t, bundle.prices[held, k])
            worst = max(worst, float(np.max(np.abs(portfolio[held, k] / wealth[held, k, None] - fraction))))
        rows.append(_bound("merton_fraction", worst, 1e-12))

    terminal = bundle.deflator[:, -1]
    rows.append(feasibility_bound(x, budget[:, -1] - terminal * (wealth[:, -1] - floor[:, -1]), z_crit))

    martingale, allowance = floor_martingale(endowment, market, bundle, estimator, floor)
    if estimator.price_dependent:
        t0, _, p0 = bundle.node(0, 0)
        direct, direct_se = estimator.estimate(t0, p0)
        allowance += 3.0 * direct_se + abs(estimator(t0, p0) - direct)
    reference = float(np.mean(martingale[:, 0]))
    rows.append(_from_report(
        "floor_martingale", martingale_test(martingale, reference, times, z_crit, atol=allowance),
        f"quadrature and estimator allowance {allowance!r}",
    ))

    def construction():
        constructed = existence_construction(
            floor, x, bundle.deflator, floor_martingale=martingale, z_crit=z_crit, atol=allowance,
        )
        return _bound("existence_construction", -np.min(constructed - floor), 1e-12 * max(1.0, abs(x)))

    if np.all(x >= floor[:, 0]):
        rows.append(_guarded("existence_construction", construction))

    if endowment.kind is EndowmentKind.ZERO and isinstance(pref.h, ConstantWeight):
        rows.append(_guarded("binomial_oracle", lambda: oracle_check(pref, kind, x)))

    failed = [row.name for row in rows if not row.passed]
    logger.info(f"Diagnostics: {len(rows) - len(failed)}/{len(rows)} passed" + (f"; failed {failed}" if failed else ""))
    return rows
