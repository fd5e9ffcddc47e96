"""
Labour-income endowments: the rate epsilon(t, p), the present value of
future endowments varpi(t, p) = Pi(t, t, p) (nonpositive, it is the
negated expectation), the minimal wealth floor L and the log-price
sensitivities phi_i = p_i d varpi / d p_i.
"""
import enum
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator

from .defaults import solver_default
from .exceptions import DomainError, NonFiniteError
from .market import TimeGrid, simulate_paths

logger = logging.getLogger(__name__)


class EndowmentKind(str, enum.Enum):
    ZERO = "zero"
    DETERMINISTIC = "deterministic"  # epsilon depends on t only
    MARKOV = "markov"                # epsilon depends on (t, p)


class ConstantRate:
    price_free = True

    def __init__(self, value):
        self.value = float(value)
        self.expression = f"constant:{self.value!r}"

    def __call__(self, t, p):
        return np.full(np.atleast_2d(p).shape[0], self.value)


class LinearInPriceRate:
    """epsilon(t, p) = coef * p_i (stock i, 1-based)."""
    price_free = False

    def __init__(self, index, coefficient):
        if index < 1:
            raise ValueError("Stock index in linear_in is 1-based.")
        self.index = int(index)
        self.coefficient = float(coefficient)
        self.expression = f"linear_in:P{self.index},{self.coefficient!r}"

    def __call__(self, t, p):
        return self.coefficient * np.atleast_2d(p)[:, self.index - 1]


class TabulatedRate:
    price_free = True

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.expression = "table:" + ",".join(f"{t!r}:{v!r}" for t, v in zip(self.times, self.values))

    def __call__(self, t, p):
        return np.full(np.atleast_2d(p).shape[0], float(np.interp(t, self.times, self.values)))


def parse_rate(expression):
    """Parse ``constant:v``, ``linear_in:Pi,coef`` or ``table:t0:v0,t1:v1,...``."""
    kind, _, body = str(expression).partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "constant":
            return ConstantRate(float(body))
        if kind == "linear_in":
            target, coefficient = body.split(",")
            target = target.strip().upper()
            if not target.startswith("P"):
                raise ValueError("expected Pi")
            return LinearInPriceRate(int(target[1:]), float(coefficient))
        if kind == "table":
            pairs = [item.split(":") for item in body.split(",")]
            return TabulatedRate([float(t) for t, _ in pairs], [float(v) for _, v in pairs])
    except ValueError as exc:
        raise ValueError(f"Cannot parse endowment rate '{expression}': {exc}") from exc
    raise ValueError(f"Unknown endowment rate '{expression}' (expected constant:, linear_in: or table:).")


@dataclass(frozen=True, eq=False)
class EndowmentModel:
    rate_fn: Optional[Callable]
    kind: EndowmentKind
    mc_inner_paths: Optional[int] = None
    mc_seed: int = 0
    mc_steps: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EndowmentKind(self.kind))
        if self.mc_inner_paths is None:
            object.__setattr__(self, "mc_inner_paths", int(solver_default("mc_inner_paths")))
        if self.mc_steps is None:
            object.__setattr__(self, "mc_steps", int(solver_default("mc_steps")))
        if self.kind is not EndowmentKind.ZERO and self.rate_fn is None:
            raise ValueError(f"A {self.kind.value} endowment needs a rate function.")
        if self.kind is EndowmentKind.DETERMINISTIC and not getattr(self.rate_fn, "price_free", True):
            raise ValueError("A deterministic endowment rate cannot depend on prices.")

    @classmethod
    def zero(cls):
        return cls(rate_fn=None, kind=EndowmentKind.ZERO)

    @property
    def expression(self):
        return getattr(self.rate_fn, "expression", None)

    def rate(self, t, p):
        """epsilon(t, p) for stock prices p of shape (m, n); zero endowments return zeros."""
        p = np.atleast_2d(p)
        if self.kind is EndowmentKind.ZERO:
            return np.zeros(p.shape[0])
        values = np.asarray(self.rate_fn(t, p), dtype=float).reshape(p.shape[0])
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"Endowment rate is non-finite at t={t}.")
        if np.any(values < 0):
            raise DomainError(f"Endowment rate must be nonnegative (min {values.min()} at t={t}).")
        return values


def _has_constant_rate(market):
    return market.state_free and "rate" in market.description


class VarPi:
    """
    Estimator for varpi(t, p). Closed form when the endowment is zero, or
    deterministic in a market with deterministic r and theta; Monte Carlo
    otherwise, optionally through a precomputed (t, log p) grid.
    """
    CLOSED_FORM = "closed_form"
    MONTE_CARLO = "monte_carlo"

    def __init__(self, model, market, mode=None):
        self.model = model
        self.market = market
        closed = model.kind is EndowmentKind.ZERO or (
            model.kind is EndowmentKind.DETERMINISTIC and market.state_free
        )
        self.mode = mode or (self.CLOSED_FORM if closed else self.MONTE_CARLO)
        if self.mode == self.CLOSED_FORM and not closed:
            raise ValueError("Closed-form varpi needs a zero or deterministic endowment in a state-free market.")
        self.interpolator = None

    @property
    def price_dependent(self):
        return self.mode == self.MONTE_CARLO

    def _closed_form(self, t):
        T = self.market.horizon
        if self.model.kind is EndowmentKind.ZERO or t >= T:
            return 0.0
        anchor = self.market.stock_prices[None, :]
        rate = self.model.rate_fn
        if _has_constant_rate(self.market) and isinstance(rate, ConstantRate):
            r = self.market.description["rate"]
            if r == 0.0:
                return -rate.value * (T - t)
            return -rate.value * -np.expm1(-r * (T - t)) / r

        def discount(u):
            if _has_constant_rate(self.market):
                return np.exp(-self.market.description["rate"] * (u - t))
            accrued, _ = integrate.quad(lambda v: self.market.rate_fn(v, anchor)[0], t, u, epsabs=1e-13, epsrel=1e-12)
            return np.exp(-accrued)

        value, _ = integrate.quad(
            lambda u: discount(u) * rate(u, anchor)[0], t, T, epsabs=1e-13, epsrel=1e-12, limit=200,
        )
        return -value

    def estimate(self, t, p):
        """(varpi(t, p), standard error); the error is 0 in closed form."""
        T = self.market.horizon
        if self.mode == self.CLOSED_FORM:
            return self._closed_form(t), 0.0
        if t >= T - 1e-12:
            return 0.0, 0.0
        p = np.asarray(p, dtype=float).ravel()
        grid = TimeGrid.uniform(t, T, self.model.mc_steps)
        bundle = simulate_paths(self.market, grid, p, self.model.mc_inner_paths, self.model.mc_seed)
        integrand = np.stack(
            [bundle.deflator[:, k] * self.model.rate(u, bundle.prices[:, k]) for k, u in enumerate(grid.times)],
            axis=1,
        )
        per_path = np.trapezoid(integrand, grid.times, axis=1)
        value = -float(np.mean(per_path))
        error = float(np.std(per_path, ddof=1) / np.sqrt(per_path.size))
        if not np.isfinite(value):
            raise NonFiniteError(f"varpi estimate at t={t}, p={p} is non-finite.")
        return value, error

    def __call__(self, t, p):
        if self.interpolator is not None:
            p = np.asarray(p, dtype=float).ravel()
            return float(self.interpolator(np.concatenate([[t], np.log(p)])[None, :])[0])
        return self.estimate(t, p)[0]

    def at_prices(self, t, prices):
        """varpi(t, p) for each row of ``prices`` (m, n)."""
        prices = np.atleast_2d(np.asarray(prices, dtype=float))
        if not self.price_dependent:
            return np.full(prices.shape[0], self(t, prices[0]))
        if self.interpolator is not None:
            points = np.column_stack([np.full(prices.shape[0], t), np.log(prices)])
            return np.asarray(self.interpolator(points), dtype=float)
        return np.array([self(t, row) for row in prices])

    def along_paths(self, bundle):
        """varpi(t_k, P_k) at every node of every path, shape (n_paths, n_times)."""
        times = bundle.grid.times
        if not self.price_dependent:
            row = np.array([self._closed_form(t) for t in times])
            return np.broadcast_to(row, (bundle.n_paths, times.size)).copy()
        return np.stack([self.at_prices(t, bundle.prices[:, k]) for k, t in enumerate(times)], axis=1)

    def build_cache(self, times, price_axes):
        """
        Precompute varpi on the tensor grid ``times`` x ``price_axes`` and answer
        later queries by multilinear interpolation in (t, log p).
        """
        axes = [np.asarray(times, dtype=float)] + [np.log(np.asarray(a, dtype=float)) for a in price_axes]
        shape = tuple(a.size for a in axes)
        values = np.empty(shape)
        for index in np.ndindex(shape):
            t = axes[0][index[0]]
            p = np.exp([axes[i + 1][index[i + 1]] for i in range(len(price_axes))])
            values[index] = self.estimate(t, p)[0]
        self.interpolator = RegularGridInterpolator(axes, values, method="linear", bounds_error=False, fill_value=None)
        logger.info(f"Cached varpi on a {self.cache_shape} grid.")
        return self

    def cache_along(self, bundle, time_nodes=11, price_nodes=None):
        """
        Cache over the time grid of ``bundle`` and the range of its prices
        padded by 10%. Price axes get 9 nodes for up to two stocks, 3 beyond.
        """
        times = bundle.grid.times
        n_stocks = bundle.prices.shape[2]
        price_nodes = price_nodes or (9 if n_stocks <= 2 else 3)
        picks = np.unique(np.linspace(0, times.size - 1, min(time_nodes, times.size)).round().astype(int))
        axes = [
            np.geomspace(0.9 * bundle.prices[:, :, i].min(), 1.1 * bundle.prices[:, :, i].max(), price_nodes)
            for i in range(n_stocks)
        ]
        return self.build_cache(times[picks], axes)

    @property
    def cache_shape(self):
        if self.interpolator is None:
            return None
        return "x".join(str(len(axis)) for axis in self.interpolator.grid)


def varpi(model, market, t, p):
    """varpi(t, p) = -E[int_t^T H(t,u,p) epsilon(u, P(t,u,p)) du]."""
    return VarPi(model, market)(t, p)


def varpi_estimate(model, market, t, p, mode=None):
    """(varpi(t, p), standard error); the error is 0 in closed form."""
    return VarPi(model, market, mode=mode).estimate(t, p)


def minimal_wealth(model, market, bundle, path_index, node_index, estimator=None):
    """
    L(s, t, p) at one node: by consistency, Pi(s,t,p) = H(s,t,p) varpi(t, P(s,t,p)),
    so L = H^(-1) Pi = varpi(t, P(s,t,p)).
    """
    estimator = estimator or VarPi(model, market)
    t, _, prices = bundle.node(path_index, node_index)
    return estimator(t, prices)


def income_along_paths(model, bundle):
    """epsilon(t_k, P_k) at every node, shape (n_paths, n_times)."""
    return np.stack([model.rate(t, bundle.prices[:, k]) for k, t in enumerate(bundle.grid.times)], axis=1)


def floor_martingale(model, market, bundle, estimator=None, floor=None):
    """
    Samples of H L - int_s^t H eps du along each path, which has constant
    mean in t when L is the minimal wealth. Returns (samples, allowance):
    the allowance is the gap between trapezoid and Simpson quadrature of the
    income integral, a bound on the discretisation bias of the samples.
    """
    estimator = estimator or VarPi(model, market)
    floor = estimator.along_paths(bundle) if floor is None else np.asarray(floor, dtype=float)
    times = bundle.grid.times
    flow = bundle.deflator * income_along_paths(model, bundle)
    accrued = integrate.cumulative_trapezoid(flow, times, axis=1, initial=0.0)
    allowance = 0.0
    if times.size > 2:
        allowance = 2.0 * abs(float(np.mean(integrate.simpson(flow, x=times, axis=1) - accrued[:, -1])))
    return bundle.deflator * floor - accrued, allowance


def phi_sensitivities(model, market, t, p, estimator=None):
    """
    (phi_0, ..., phi_n) with phi_i = p_i d varpi / d p_i by central differences
    (relative bump, common random numbers through the shared mc_seed).
    phi_0 is 0: varpi has no dependence on the deflating coordinate.
    """
    estimator = estimator or VarPi(model, market)
    p = np.asarray(market.stock_prices if p is None else p, dtype=float).ravel()
    if p.size == market.n_stocks + 1:
        p = p[1:]
    phi = np.zeros(market.n_stocks + 1)
    if not estimator.price_dependent or t >= market.horizon - 1e-12:
        return phi
    bump = solver_default("fd_bump")
    for i in range(market.n_stocks):
        h = bump * p[i]
        up, down = p.copy(), p.copy()
        up[i] += h
        down[i] -= h
        if down[i] > 0:
            slope = (estimator(t, up) - estimator(t, down)) / (2 * h)
        else:
            slope = (estimator(t, up) - estimator(t, p)) / h
        phi[i + 1] = p[i] * slope
    logger.debug(f"phi at t={t}: {phi}")
    return phi
