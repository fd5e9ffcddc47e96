"""
Financial market: coefficient functions, market price of risk and
log-Euler simulation of prices, bond, exponential martingale and state
price density.

Coefficient functions are vectorised over paths: each takes a time ``t``
and an ``(m, n)`` array of stock prices and returns ``r`` as ``(m,)``,
``b`` and ``delta`` as ``(m, n)`` and ``sigma`` as ``(m, n, d)``.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import pandas as pd

from .defaults import solver_default, thread_count
from .exceptions import NoRiskPriceError, NonFiniteError

logger = logging.getLogger(__name__)

SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class MarketSpec:
    n_stocks: int
    n_brownian: int
    rate_fn: Callable
    drift_fn: Callable
    vol_fn: Callable
    dividend_fn: Callable
    initial_prices: np.ndarray  # (n+1,), coordinate 0 is the deflating asset
    horizon: float
    state_free: bool = False  # coefficients do not depend on prices
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        prices = np.asarray(self.initial_prices, dtype=float)
        object.__setattr__(self, "initial_prices", prices)
        if self.n_stocks < 1 or self.n_brownian < 1:
            raise ValueError("n_stocks and n_brownian must be positive integers.")
        if prices.shape != (self.n_stocks + 1,):
            raise ValueError(f"initial_prices must have length n+1 = {self.n_stocks + 1}, got {prices.shape}.")
        if np.any(prices <= 0) or not np.all(np.isfinite(prices)):
            raise ValueError("initial_prices must be finite and strictly positive.")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive.")

    @property
    def stock_prices(self):
        return self.initial_prices[1:]

    @classmethod
    def constant(cls, rate, drift, volatility, dividend=None, initial_prices=None, horizon=1.0):
        """Market whose coefficients are constants (r scalar, b and delta n-vectors, sigma n x d)."""
        drift = np.atleast_1d(np.asarray(drift, dtype=float))
        n = drift.shape[0]
        volatility = np.asarray(volatility, dtype=float).reshape(n, -1)
        d = volatility.shape[1]
        dividend = np.zeros(n) if dividend is None else np.atleast_1d(np.asarray(dividend, dtype=float))
        if initial_prices is None:
            initial_prices = np.ones(n + 1)
        rate = float(rate)

        def rate_fn(t, p):
            return np.full(p.shape[0], rate)

        def drift_fn(t, p):
            return np.broadcast_to(drift, (p.shape[0], n))

        def vol_fn(t, p):
            return np.broadcast_to(volatility, (p.shape[0], n, d))

        def dividend_fn(t, p):
            return np.broadcast_to(dividend, (p.shape[0], n))

        description = {
            "rate": rate,
            "drift": drift.tolist(),
            "volatility": volatility.tolist(),
            "dividend": dividend.tolist(),
        }
        return cls(
            n_stocks=n, n_brownian=d,
            rate_fn=rate_fn, drift_fn=drift_fn, vol_fn=vol_fn, dividend_fn=dividend_fn,
            initial_prices=initial_prices, horizon=float(horizon),
            state_free=True, description=description,
        )

    def coefficients(self, t, p):
        """
        Evaluate (r, b, sigma, delta) at time t for stock prices p of shape (m, n).
        State-free markets are evaluated once and returned with leading axis 1.
        """
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if self.state_free:
            p = p[:1]
        m = p.shape[0]
        r = np.asarray(self.rate_fn(t, p), dtype=float).reshape(m)
        b = np.asarray(self.drift_fn(t, p), dtype=float).reshape(m, self.n_stocks)
        sigma = np.asarray(self.vol_fn(t, p), dtype=float).reshape(m, self.n_stocks, self.n_brownian)
        delta = np.asarray(self.dividend_fn(t, p), dtype=float).reshape(m, self.n_stocks)
        for name, value in (("rate", r), ("drift", b), ("volatility", sigma), ("dividend", delta)):
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(f"{name} coefficient is non-finite at t={t}.")
        return r, b, sigma, delta

    def smoke_test(self, n_times=5, scales=(0.5, 1.0, 2.0)):
        """Evaluate every coefficient on a small (t, p) grid around the initial prices."""
        points = np.array([self.stock_prices * s for s in scales])
        for t in np.linspace(0.0, self.horizon, n_times):
            r, b, sigma, delta = self.coefficients(t, points)
            market_price_of_risk(self, t, points)
        logger.debug(f"Market smoke test passed on {n_times} times x {len(scales)} price scales.")


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("A time grid needs at least two points.")
        if np.any(np.diff(times) <= 0):
            raise ValueError("Grid times must be strictly increasing.")

    @classmethod
    def uniform(cls, start, end, n_steps):
        if n_steps < 1:
            raise ValueError("n_steps must be a positive integer.")
        return cls(np.linspace(start, end, n_steps + 1))

    @property
    def start(self):
        return float(self.times[0])

    @property
    def end(self):
        return float(self.times[-1])

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def is_uniform(self):
        steps = np.diff(self.times)
        return bool(np.allclose(steps, steps[0], rtol=1e-12, atol=0.0))

    def tail(self, node_index):
        """Sub-grid starting at node_index (shares the exact float times)."""
        return TimeGrid(self.times[node_index:])

    def index_of(self, t):
        """Index of the node equal to t (to 1e-12)."""
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-12))
        if hits.size == 0:
            raise ValueError(f"t={t} is not a node of the grid.")
        return int(hits[0])


@dataclass(frozen=True, eq=False)
class PathBundle:
    grid: TimeGrid
    log_prices: np.ndarray  # (n_paths, n_times, n)
    bond: np.ndarray        # (n_paths, n_times)
    expmart: np.ndarray
    deflator: np.ndarray
    theta: Optional[np.ndarray]  # (n_paths, n_times, d); None when read back from CSV
    seed: int
    path_ids: np.ndarray
    initial_prices: np.ndarray  # (n,) or per path (n_paths, n); exact node-0 prices

    @property
    def n_paths(self):
        return self.log_prices.shape[0]

    @cached_property
    def prices(self):
        prices = np.exp(self.log_prices)
        prices[:, 0, :] = self.initial_prices
        return prices

    def node(self, path_index, node_index):
        """(t, H, P) at one node of one path."""
        return (
            float(self.grid.times[node_index]),
            float(self.deflator[path_index, node_index]),
            self.prices[path_index, node_index].copy(),
        )

    def to_frame(self):
        n = self.log_prices.shape[2]
        n_times = self.grid.times.size
        frame = {
            "time": np.tile(self.grid.times, self.n_paths),
            "path_id": np.repeat(self.path_ids, n_times),
        }
        for i in range(n):
            frame[f"P_{i + 1}"] = self.prices[:, :, i].ravel()
        frame["B"] = np.asarray(self.bond).ravel()
        frame["Z"] = np.asarray(self.expmart).ravel()
        frame["H"] = np.asarray(self.deflator).ravel()
        return pd.DataFrame(frame)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Wrote {self.n_paths} paths x {self.grid.times.size} nodes to {path}")


def bundle_from_csv(path, seed=0):
    """Read a bundle written by PathBundle.to_csv (theta is not stored)."""
    frame = pd.read_csv(path, float_precision="round_trip")
    required = {"time", "path_id", "B", "Z", "H"}
    missing = required - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    price_columns = sorted((c for c in frame.columns if c.startswith("P_")), key=lambda c: int(c[2:]))
    frame = frame.sort_values(["path_id", "time"], kind="stable")
    path_ids = frame["path_id"].unique()
    times = frame.loc[frame["path_id"] == path_ids[0], "time"].to_numpy()
    shape = (path_ids.size, times.size)
    prices = frame[price_columns].to_numpy().reshape(shape + (len(price_columns),))
    return PathBundle(
        grid=TimeGrid(times),
        log_prices=np.log(prices),
        bond=frame["B"].to_numpy().reshape(shape),
        expmart=frame["Z"].to_numpy().reshape(shape),
        deflator=frame["H"].to_numpy().reshape(shape),
        theta=None,
        seed=int(seed),
        path_ids=path_ids.astype(np.int64),
        initial_prices=prices[0, 0].copy(),
    )


def _risk_price(sigma, excess, tol):
    # minimum-norm solution: pinv(sigma) @ excess lies in ker(sigma)^perp
    theta = (np.linalg.pinv(sigma) @ excess[..., None])[..., 0]
    residual = (sigma @ theta[..., None])[..., 0] - excess
    scale = np.maximum(np.linalg.norm(excess, axis=-1), 1.0)
    worst = np.max(np.linalg.norm(residual, axis=-1) / scale)
    if worst > tol:
        raise NoRiskPriceError(
            f"sigma theta = b + delta - r 1 has no solution (relative residual {worst:.3e} > {tol:.1e})."
        )
    return theta


def market_price_of_risk(spec, t, p):
    """
    Minimum-norm theta solving sigma theta = b + delta - r 1_n at (t, p).

    ``p`` is an n-vector (returns a d-vector) or an (m, n) array (returns (m, d)).
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    r, b, sigma, delta = spec.coefficients(t, np.atleast_2d(p))
    theta = _risk_price(sigma, b + delta - r[:, None], solver_default("tol_lsq"))
    if single:
        return theta[0]
    if spec.state_free:
        return np.broadcast_to(theta, (p.shape[0], spec.n_brownian)).copy()
    return theta


def _stock_vector(spec, p0):
    p0 = spec.stock_prices if p0 is None else np.asarray(p0, dtype=float).ravel()
    if p0.shape == (spec.n_stocks + 1,):
        p0 = p0[1:]
    if p0.shape != (spec.n_stocks,) or np.any(p0 <= 0):
        raise ValueError(f"Initial stock prices must be a positive {spec.n_stocks}-vector.")
    return p0


def path_generator(seed, path_id):
    """Counter-based generator for one path: Philox keyed by (seed, path_id)."""
    key = ((int(seed) & SEED_MASK) << 64) | (int(path_id) & SEED_MASK)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(grid, n_brownian, seed, path_ids):
    """
    Gaussian increments of shape (n_paths, n_steps, d) for the given grid.

    Path k draws from its own Philox stream, so the values do not depend on
    how many other paths are requested or on the number of worker threads.
    """
    path_ids = np.asarray(path_ids, dtype=np.int64)
    sqrt_dt = np.sqrt(np.diff(grid.times))[:, None]
    increments = np.empty((path_ids.size, grid.n_steps, n_brownian))

    def fill(block):
        for row in block:
            draws = path_generator(seed, path_ids[row]).standard_normal((grid.n_steps, n_brownian))
            increments[row] = draws * sqrt_dt

    blocks = np.array_split(np.arange(path_ids.size), thread_count())
    if len(blocks) == 1:
        fill(blocks[0])
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            list(pool.map(fill, blocks))
    return increments


def _integrate(spec, times, log_p0, dW):
    """Log-Euler integration with left-endpoint coefficients."""
    tol = solver_default("tol_lsq")
    m, steps = dW.shape[0], dW.shape[1]
    n = spec.n_stocks
    width = 1 if spec.state_free else m
    log_p = np.empty((m, steps + 1, n))
    log_p[:, 0] = log_p0
    log_b = np.zeros((width, steps + 1))
    log_z = np.zeros((m, steps + 1))
    theta_all = np.empty((width, steps + 1, spec.n_brownian))

    for k in range(steps + 1):
        t = times[k]
        r, b, sigma, delta = spec.coefficients(t, np.exp(log_p[:, k]))
        theta = _risk_price(sigma, b + delta - r[:, None], tol)
        theta_all[:, k] = theta
        if k == steps:
            break
        dt = times[k + 1] - times[k]
        drift = b - 0.5 * np.sum(sigma * sigma, axis=-1)
        log_p[:, k + 1] = log_p[:, k] + drift * dt + (sigma @ dW[:, k, :, None])[..., 0]
        log_b[:, k + 1] = log_b[:, k] + r * dt
        log_z[:, k + 1] = log_z[:, k] - np.sum(theta * dW[:, k], axis=-1) - 0.5 * np.sum(theta * theta, axis=-1) * dt

    if not (np.all(np.isfinite(log_p)) and np.all(np.isfinite(log_z))):
        raise NonFiniteError("Simulated log-prices or exponential martingale became non-finite.")
    return log_p, log_b, log_z, theta_all


def _assemble(spec, grid, log_p, log_b, log_z, theta, seed, path_ids, p0):
    m = log_p.shape[0]
    bond = np.broadcast_to(np.exp(log_b), (m, grid.times.size))
    expmart = np.exp(log_z)
    deflator = expmart / bond
    theta = np.broadcast_to(theta, (m,) + theta.shape[1:])
    return PathBundle(
        grid=grid, log_prices=log_p, bond=bond, expmart=expmart, deflator=deflator,
        theta=theta, seed=int(seed), path_ids=np.asarray(path_ids, dtype=np.int64),
        initial_prices=np.asarray(p0, dtype=float).copy(),
    )


def simulate_paths(spec, grid, p0=None, n_paths=1000, seed=0, path_ids=None):
    """
    Simulate P, B, Z and H = Z/B on ``grid`` starting from stock prices p0.

    ``p0`` may be the n stock prices or the full (n+1)-vector (coordinate 0
    is then ignored). Output is a deterministic function of the arguments.
    """
    if grid.start < -1e-12 or grid.end > spec.horizon + 1e-12:
        raise ValueError(f"Grid [{grid.start}, {grid.end}] is not inside [0, {spec.horizon}].")
    p0 = _stock_vector(spec, p0)
    if path_ids is None:
        path_ids = np.arange(n_paths, dtype=np.int64)
    dW = brownian_increments(grid, spec.n_brownian, seed, path_ids)
    log_p0 = np.broadcast_to(np.log(p0), (len(path_ids), spec.n_stocks))
    log_p, log_b, log_z, theta = _integrate(spec, grid.times, log_p0, dW)
    logger.debug(f"Simulated {len(path_ids)} paths over {grid.n_steps} steps (seed={seed}).")
    return _assemble(spec, grid, log_p, log_b, log_z, theta, seed, path_ids, p0)


def restart_paths(spec, bundle, node_index, seed=None):
    """
    Continue every path of ``bundle`` from ``node_index`` to the end of its
    grid with B, Z and H restarted at 1 and the same Gaussian increments the
    bundle used (or those of ``seed`` when given).
    """
    seed = bundle.seed if seed is None else seed
    dW = brownian_increments(bundle.grid, spec.n_brownian, seed, bundle.path_ids)[:, node_index:]
    tail = bundle.grid.tail(node_index)
    log_p, log_b, log_z, theta = _integrate(spec, tail.times, bundle.log_prices[:, node_index], dW)
    start = np.exp(bundle.log_prices[:, node_index])
    return _assemble(spec, tail, log_p, log_b, log_z, theta, seed, bundle.path_ids, start)


def restart_consistency_check(spec, grid, p0=None, seed=0, n_paths=16, split_index=None, other_seed=None):
    """
    Largest absolute difference between terminal prices of a single run and
    a run split at an interior node. Zero when both legs reuse the same
    increments; ``other_seed`` drives the second leg with different noise.
    """
    split_index = grid.n_steps // 2 if split_index is None else split_index
    if not 0 <= split_index < grid.n_steps:
        raise ValueError(f"split_index must be in [0, {grid.n_steps}).")
    whole = simulate_paths(spec, grid, p0, n_paths, seed)
    second_leg = restart_paths(spec, whole, split_index, seed=other_seed)
    deviation = float(np.max(np.abs(whole.prices[:, -1] - second_leg.prices[:, -1])))
    logger.info(f"Restart consistency at node {split_index}: max deviation {deviation!r}")
    return deviation
