"""
State preference structures (U1, U2), their marginal inverses (I1, I2),
the aggregate demand function X(t, y) = I2(y) + int_t^T I1(t', y) dt' and
its inverse, the homogeneity coefficients, and the convex-duality check.

Utilities act on discounted consumption / discounted terminal wealth as
valued at decision time. The power family is U1(t, x) = h(t) x^alpha,
U2(x) = c x^alpha; the log family U1 = h log x, U2 = c log x; the
separable family U1 = h u(x / h), U2 = c u(x / c) for a base utility u.
"""
import enum
import logging
import warnings

import numpy as np
from numpy.polynomial import Polynomial
from scipy import integrate, optimize

from .defaults import solver_default
from .exceptions import ConvergenceError, DomainError, UnsupportedFamily

logger = logging.getLogger(__name__)


class ProblemKind(str, enum.Enum):
    CONSUMPTION_ONLY = "consumption_only"
    TERMINAL_ONLY = "terminal_only"
    BOTH = "both"

    @property
    def has_running(self):
        return self is not ProblemKind.TERMINAL_ONLY

    @property
    def has_terminal(self):
        return self is not ProblemKind.CONSUMPTION_ONLY


# --- weight functions h(t) ---

class WeightFunction:
    """A continuous positive function of time; ``expression`` echoes the config form."""
    expression = ""
    knots = ()

    def __call__(self, t):
        raise NotImplementedError

    def integral(self, a, b, power=1.0):
        """int_a^b h(t)^power dt"""
        if b <= a:
            return 0.0
        value, _ = integrate.quad(
            lambda t: self(t) ** power, a, b,
            epsabs=1e-14, epsrel=1e-13, limit=200,
            points=[k for k in self.knots if a < k < b] or None,
        )
        return value

    def integral_h_log_h(self, a, b):
        """int_a^b h log h dt"""
        if b <= a:
            return 0.0
        value, _ = integrate.quad(
            lambda t: self(t) * np.log(self(t)), a, b,
            epsabs=1e-14, epsrel=1e-13, limit=200,
            points=[k for k in self.knots if a < k < b] or None,
        )
        return value

    def check_positive(self, horizon, n=201):
        values = np.array([self(t) for t in np.linspace(0.0, horizon, n)])
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise DomainError(f"h = {self.expression} must be finite and positive on [0, {horizon}].")


class ConstantWeight(WeightFunction):
    def __init__(self, value):
        self.value = float(value)
        self.expression = f"constant:{self.value!r}"

    def __call__(self, t):
        return self.value

    def integral(self, a, b, power=1.0):
        return 0.0 if b <= a else self.value ** power * (b - a)

    def integral_h_log_h(self, a, b):
        return 0.0 if b <= a else self.value * np.log(self.value) * (b - a)


class PolynomialWeight(WeightFunction):
    def __init__(self, coefficients):
        self.polynomial = Polynomial([float(c) for c in coefficients])
        self.expression = "poly:" + ",".join(repr(float(c)) for c in coefficients)

    def __call__(self, t):
        return float(self.polynomial(t))

    def integral(self, a, b, power=1.0):
        if power == 1.0 and b > a:
            antiderivative = self.polynomial.integ()
            return float(antiderivative(b) - antiderivative(a))
        return super().integral(a, b, power)


class TabulatedWeight(WeightFunction):
    """Piecewise linear through (t_k, h_k); constant beyond the table ends."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.times.size < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("A tabulated weight needs at least two strictly increasing times.")
        self.knots = tuple(self.times)
        self.expression = "table:" + ",".join(f"{t!r}:{v!r}" for t, v in zip(self.times, self.values))

    def __call__(self, t):
        return float(np.interp(t, self.times, self.values))


def parse_weight(expression):
    """Parse ``constant:v``, ``poly:c0,c1,...`` or ``table:t0:v0,t1:v1,...``."""
    kind, _, body = str(expression).partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "constant":
            return ConstantWeight(float(body))
        if kind == "poly":
            return PolynomialWeight([float(c) for c in body.split(",")])
        if kind == "table":
            pairs = [item.split(":") for item in body.split(",")]
            return TabulatedWeight([float(t) for t, _ in pairs], [float(v) for _, v in pairs])
    except ValueError as exc:
        raise ValueError(f"Cannot parse weight expression '{expression}': {exc}") from exc
    raise ValueError(f"Unknown weight expression '{expression}' (expected constant:, poly: or table:).")


# --- one-dimensional utilities ---

class LogUtility:
    name = "log"

    def value(self, x):
        with np.errstate(divide="ignore"):
            return np.log(x)

    def marginal(self, x):
        return 1.0 / x

    def inverse_marginal(self, y):
        return 1.0 / y


class PowerUtility:
    """u(x) = x^alpha / alpha"""
    name = "power"

    def __init__(self, alpha):
        if not 0.0 < alpha < 1.0:
            raise DomainError(f"Power exponent must lie in (0, 1), got {alpha}.")
        self.alpha = float(alpha)

    def value(self, x):
        return np.power(x, self.alpha) / self.alpha

    def marginal(self, x):
        return np.power(x, self.alpha - 1.0)

    def inverse_marginal(self, y):
        return np.power(y, 1.0 / (self.alpha - 1.0))


class RunningUtility:
    """x -> U1(t, x) at a fixed t, with its marginal inverse."""

    def __init__(self, preference, t):
        self.preference = preference
        self.t = t

    def value(self, x):
        return self.preference.U1(self.t, x)

    def inverse_marginal(self, y):
        return self.preference.I1(self.t, y)


# --- state preference structures ---

class StatePreference:
    family = "custom"
    breakpoints = ()

    def __init__(self, h, bequest_weight, horizon):
        self.h = h
        self.bequest_weight = float(bequest_weight)
        self.horizon = float(horizon)
        if self.bequest_weight < 0:
            raise DomainError("bequest_weight must be nonnegative.")
        if not self.horizon > 0:
            raise DomainError("horizon must be positive.")
        if h is not None:
            h.check_positive(self.horizon)

    @property
    def has_bequest(self):
        return self.bequest_weight > 0

    def describe(self):
        return {
            "family": self.family,
            "h": getattr(self.h, "expression", None),
            "bequest_weight": self.bequest_weight,
            "horizon": self.horizon,
        }

    def U1(self, t, x):
        raise NotImplementedError

    def U2(self, x):
        raise NotImplementedError

    def I1(self, t, y):
        raise NotImplementedError

    def I2(self, y):
        raise NotImplementedError

    def terminal_active(self, kind):
        return kind.has_terminal and self.has_bequest

    # Defaults below integrate numerically; closed-form families override them.

    def capital_X(self, t, y, kind):
        total = self.I2(y) if self.terminal_active(kind) else 0.0
        if kind.has_running and t < self.horizon:
            tol = solver_default("tol_quad")
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", integrate.IntegrationWarning)
                running, _ = integrate.quad(
                    lambda u: self.I1(u, y), t, self.horizon,
                    epsabs=tol * 1e-2, epsrel=tol, limit=200,
                    points=[b for b in self.breakpoints if t < b < self.horizon] or None,
                )
            for warning in caught:
                logger.warning(f"Quadrature of I1 at t={t}, y={y}: {warning.message}")
            total += running
        return float(total)

    def value_G(self, s, y, kind):
        total = self.U2(self.I2(y)) if self.terminal_active(kind) else 0.0
        if kind.has_running and s < self.horizon:
            tol = solver_default("tol_quad")
            running, _ = integrate.quad(
                lambda u: self.U1(u, self.I1(u, y)), s, self.horizon,
                epsabs=tol * 1e-2, epsrel=tol, limit=200,
                points=[b for b in self.breakpoints if s < b < self.horizon] or None,
            )
            total += running
        return float(total)

    def invert_X(self, t, x, kind):
        return _bracketed_inverse(self, t, x, kind)

    def homogeneity_coefficients(self, s, t, kind):
        raise UnsupportedFamily(f"No closed-form homogeneity coefficients for the {self.family} family.")


class _ScaledPreference(StatePreference):
    """
    Families whose demand factors as X(t, y) = scale(t) * g(y), so the
    homogeneity coefficients are ratios of scales.
    """

    def running_scale(self, a, b):
        raise NotImplementedError

    def terminal_scale(self):
        raise NotImplementedError

    def running_density(self, t):
        raise NotImplementedError

    def scale(self, t, kind):
        total = self.terminal_scale() if self.terminal_active(kind) else 0.0
        if kind.has_running:
            total += self.running_scale(t, self.horizon)
        return total

    def demand_profile(self, y):
        """g(y) with X(t, y) = scale(t) g(y)."""
        raise NotImplementedError

    def inverse_profile(self, z):
        raise NotImplementedError

    def capital_X(self, t, y, kind):
        return float(self.scale(t, kind) * self.demand_profile(y))

    def invert_X(self, t, x, kind):
        scale = self.scale(t, kind)
        if scale <= 0:
            raise DomainError(f"X(t={t}, .) vanishes identically for {kind.value}; it has no inverse.")
        return float(self.inverse_profile(x / scale))

    def homogeneity_coefficients(self, s, t, kind):
        denominator = self.scale(t, kind)
        if denominator <= 0:
            raise DomainError(f"Homogeneity coefficients are undefined at t={t} for {kind.value}.")
        alpha_I = self.running_density(t) / denominator if kind.has_running else 0.0
        return HomogeneityCoefficients(alpha_st=self.scale(s, kind) / denominator, alpha_I_t=alpha_I)


class PowerPreference(_ScaledPreference):
    family = "power"

    def __init__(self, alpha, h, bequest_weight, horizon):
        super().__init__(h, bequest_weight, horizon)
        if not 0.0 < alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {alpha}.")
        self.alpha = float(alpha)
        self.q = 1.0 / (1.0 - self.alpha)

    def describe(self):
        return {**super().describe(), "alpha": self.alpha}

    def U1(self, t, x):
        return self.h(t) * np.power(x, self.alpha)

    def U2(self, x):
        return self.bequest_weight * np.power(x, self.alpha)

    def I1(self, t, y):
        return np.power(self.alpha * self.h(t) / y, self.q)

    def I2(self, y):
        return np.power(self.alpha * self.bequest_weight / y, self.q)

    def running_scale(self, a, b):
        return self.h.integral(a, b, power=self.q)

    def terminal_scale(self):
        return self.bequest_weight ** self.q

    def running_density(self, t):
        return self.h(t) ** self.q

    def demand_profile(self, y):
        return np.power(self.alpha / y, self.q)

    def inverse_profile(self, z):
        return self.alpha * np.power(z, -1.0 / self.q)

    def value_G(self, s, y, kind):
        scale = self.terminal_scale() if self.terminal_active(kind) else 0.0
        if kind.has_running:
            scale += self.running_scale(s, self.horizon)
        return float(scale * np.power(self.alpha / y, self.q * self.alpha))


class LogPreference(_ScaledPreference):
    family = "log"

    def U1(self, t, x):
        with np.errstate(divide="ignore"):
            return self.h(t) * np.log(x)

    def U2(self, x):
        if not self.has_bequest:
            return 0.0
        with np.errstate(divide="ignore"):
            return self.bequest_weight * np.log(x)

    def I1(self, t, y):
        return self.h(t) / y

    def I2(self, y):
        return self.bequest_weight / y

    def running_scale(self, a, b):
        return self.h.integral(a, b)

    def terminal_scale(self):
        return self.bequest_weight

    def running_density(self, t):
        return self.h(t)

    def demand_profile(self, y):
        return 1.0 / y

    def inverse_profile(self, z):
        return 1.0 / z

    def value_G(self, s, y, kind):
        total = 0.0
        if kind.has_running:
            total += self.h.integral_h_log_h(s, self.horizon) - np.log(y) * self.h.integral(s, self.horizon)
        if self.terminal_active(kind):
            c = self.bequest_weight
            total += c * np.log(c / y)
        return float(total)


class SeparablePreference(_ScaledPreference):
    family = "separable"

    def __init__(self, utility, h, bequest_weight, horizon):
        super().__init__(h, bequest_weight, horizon)
        self.utility = utility

    def describe(self):
        described = {**super().describe(), "base_utility": self.utility.name}
        if hasattr(self.utility, "alpha"):
            described["base_alpha"] = self.utility.alpha
        return described

    def U1(self, t, x):
        h = self.h(t)
        return h * self.utility.value(np.asarray(x) / h)

    def U2(self, x):
        if not self.has_bequest:
            return 0.0
        c = self.bequest_weight
        return c * self.utility.value(np.asarray(x) / c)

    def I1(self, t, y):
        return self.h(t) * self.utility.inverse_marginal(y)

    def I2(self, y):
        return self.bequest_weight * self.utility.inverse_marginal(y)

    def running_scale(self, a, b):
        return self.h.integral(a, b)

    def terminal_scale(self):
        return self.bequest_weight

    def running_density(self, t):
        return self.h(t)

    def demand_profile(self, y):
        return self.utility.inverse_marginal(y)

    def inverse_profile(self, z):
        return self.utility.marginal(z)

    def value_G(self, s, y, kind):
        return float(self.scale(s, kind) * self.utility.value(self.utility.inverse_marginal(y)))


class CustomPreference(StatePreference):
    """
    User-supplied U1(t, x), U2(x), I1(t, y), I2(y). X and G are computed by
    adaptive quadrature; ``breakpoints`` lists times where U1 changes form.
    """
    family = "custom"

    def __init__(self, U1, U2, I1, I2, horizon, bequest=True, breakpoints=()):
        super().__init__(h=None, bequest_weight=1.0 if bequest else 0.0, horizon=horizon)
        self._U1, self._U2, self._I1, self._I2 = U1, U2, I1, I2
        self.breakpoints = tuple(breakpoints)

    def U1(self, t, x):
        return self._U1(t, x)

    def U2(self, x):
        return self._U2(x) if self.has_bequest else 0.0

    def I1(self, t, y):
        return self._I1(t, y)

    def I2(self, y):
        return self._I2(y) if self.has_bequest else 0.0


class HomogeneityCoefficients:
    __slots__ = ("alpha_st", "alpha_I_t")

    def __init__(self, alpha_st, alpha_I_t):
        self.alpha_st = float(alpha_st)
        self.alpha_I_t = float(alpha_I_t)

    def __repr__(self):
        return f"HomogeneityCoefficients(alpha_st={self.alpha_st!r}, alpha_I_t={self.alpha_I_t!r})"


def _check_time(pref, t):
    if not -1e-12 <= t <= pref.horizon + 1e-12:
        raise DomainError(f"t={t} is outside [0, {pref.horizon}].")


def _bracketed_inverse(pref, t, x, kind):
    """Solve X(t, y) = x on log y: expand a bracket from y = 1 by factors of 10, then Brent."""
    limit = solver_default("bracket_limit")
    target = np.log(x)

    def gap(log_y):
        value = pref.capital_X(t, float(np.exp(log_y)), kind)
        if value <= 0:
            return -np.inf
        return np.log(value) - target

    lo = hi = 0.0
    if gap(0.0) > 0:
        while gap(hi) > 0:
            hi += np.log(10.0)
            if hi > np.log(limit):
                raise ConvergenceError(f"No bracket for X^(-1)(t={t}, x={x}) below y={limit:g}.")
    else:
        while gap(lo) < 0:
            lo -= np.log(10.0)
            if lo < -np.log(limit):
                raise ConvergenceError(f"No bracket for X^(-1)(t={t}, x={x}) above y={1 / limit:g}.")
    if lo == hi:
        return 1.0
    try:
        root, result = optimize.brentq(
            gap, lo, hi, xtol=1e-15, maxiter=solver_default("max_iter"), full_output=True, disp=False,
        )
    except (RuntimeError, ValueError) as exc:
        raise ConvergenceError(f"X^(-1)(t={t}, x={x}) failed: {exc}") from exc
    if not result.converged:
        raise ConvergenceError(f"X^(-1)(t={t}, x={x}) did not converge in {result.iterations} iterations.")
    y = float(np.exp(root))
    error = abs(pref.capital_X(t, y, kind) - x) / x
    if error > solver_default("tol_inv"):
        logger.warning(f"X^(-1)(t={t}, x={x}) relative error {error:.2e} exceeds tol_inv.")
    return y


def capital_X(pref, t, y, kind=ProblemKind.BOTH):
    """Aggregate demand X(t, y) (X1 for consumption only, X2 = I2 for terminal only)."""
    if not y > 0:
        raise DomainError(f"y must be positive, got {y}.")
    _check_time(pref, t)
    return pref.capital_X(min(t, pref.horizon), y, ProblemKind(kind))


def invert_X(pref, t, x, kind=ProblemKind.BOTH):
    """The multiplier y with X(t, y) = x."""
    if not x > 0:
        raise DomainError(f"x must be positive, got {x}.")
    _check_time(pref, t)
    return pref.invert_X(min(t, pref.horizon), x, ProblemKind(kind))


def homogeneity_coefficients(pref, s, t, kind=ProblemKind.BOTH):
    if not 0 <= s <= t <= pref.horizon:
        raise DomainError(f"Need 0 <= s <= t <= T, got s={s}, t={t}.")
    return pref.homogeneity_coefficients(s, t, ProblemKind(kind))


def _relative_spread(ratios):
    ratios = np.asarray(ratios, dtype=float)
    return float((ratios.max() - ratios.min()) / np.max(np.abs(ratios)))


def verify_homogeneity(pref, s, t, x_grid, kind=ProblemKind.BOTH):
    """
    Largest relative spread over ``x_grid`` of alpha(s,t)(x)/x, where
    alpha(s,t) = X(s, X^(-1)(t, .)), and of alpha^I(s,s)(x)/x where
    alpha^I(s,s) = I1(s, X^(-1)(s, .)).
    """
    kind = ProblemKind(kind)
    x_grid = np.asarray(x_grid, dtype=float)
    ratios = [capital_X(pref, s, invert_X(pref, t, x, kind), kind) / x for x in x_grid]
    deviation = _relative_spread(ratios)
    if kind.has_running and s < pref.horizon:
        ratios_I = [pref.I1(s, invert_X(pref, s, x, kind)) / x for x in x_grid]
        deviation = max(deviation, _relative_spread(ratios_I))
    logger.debug(f"Homogeneity deviation for {pref.family} on (s={s}, t={t}): {deviation:.3e}")
    return deviation


def marginal_inverse_check(pref, t, x_grid, step=1e-6):
    """max |I1(t, dU1/dx(t, x)) - x| / x with a central difference of relative step ``step``."""
    worst = 0.0
    for x in np.asarray(x_grid, dtype=float):
        dx = step * x
        slope = (pref.U1(t, x + dx) - pref.U1(t, x - dx)) / (2 * dx)
        worst = max(worst, abs(pref.I1(t, slope) - x) / x)
    return float(worst)


def duality_gap(utility, y, x_grid):
    """
    max over the grid of U(x) - x y, minus U(I(y)) - y I(y). Nonpositive up
    to rounding, approaching zero when the grid passes near I(y).
    """
    if not y > 0:
        raise DomainError(f"y must be positive, got {y}.")
    x_grid = np.asarray(x_grid, dtype=float)
    best_on_grid = np.max(utility.value(x_grid) - x_grid * y)
    x_star = utility.inverse_marginal(y)
    return float(best_on_grid - (utility.value(x_star) - y * x_star))
