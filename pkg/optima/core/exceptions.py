"""
Exception hierarchy for the solver.

Each error carries a ``default_detail`` in the manner of DRF's
APIException so commands can report a readable message without the
caller formatting one.
"""


class OptimaError(Exception):
    default_detail = "Solver error."

    def __init__(self, detail=None):
        self.detail = detail if detail is not None else self.default_detail
        super().__init__(self.detail)


class NoRiskPriceError(OptimaError):
    default_detail = "Excess returns are not in the range of the volatility matrix."


class NonFiniteError(OptimaError):
    default_detail = "A coefficient or estimate evaluated to a non-finite value."


class DomainError(OptimaError):
    default_detail = "Argument outside the domain of the function."


class ConvergenceError(OptimaError):
    default_detail = "Root finder did not converge."


class UnsupportedFamily(OptimaError):
    default_detail = "Operation has no closed form for this preference family."


class FloorRegion(OptimaError):
    """Initial wealth is at or below the endowment floor."""
    default_detail = "Initial wealth does not exceed the present value floor."


class SingularCovariance(OptimaError):
    default_detail = "sigma sigma' is singular or too badly conditioned to invert."


class NotHomogeneous(OptimaError):
    default_detail = "Preference structure fails the homogeneity gate."


class ConfigError(OptimaError):
    default_detail = "Invalid run configuration."


class VerificationError(OptimaError):
    default_detail = "A construction-level assertion failed."
