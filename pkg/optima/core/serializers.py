from django.conf import settings
from rest_framework import serializers

from .endowment import EndowmentKind, EndowmentModel, VarPi, parse_rate
from .exceptions import OptimaError
from .market import MarketSpec
from .preferences import (
    LogPreference, LogUtility, PowerPreference, PowerUtility, ProblemKind, SeparablePreference, parse_weight,
)
from .verify import MAX_BINOMIAL_PERIODS


class DecimalVectorField(serializers.Field):
    """
    Comma-separated decimal numbers. With ``matrix=True`` rows are separated
    by ';' and must have equal length.
    """
    default_error_messages = {
        "invalid": "Expected decimal numbers separated by ','{rows}; got '{value}'.",
        "ragged": "Matrix rows must all have the same length.",
        "non_finite": "Values must be finite.",
    }

    def __init__(self, matrix=False, **kwargs):
        self.matrix = matrix
        super().__init__(**kwargs)

    def _row(self, text, value):
        try:
            numbers = [float(item) for item in text.split(",")]
        except ValueError:
            self.fail("invalid", rows=" and ';'" if self.matrix else "", value=value)
        if not all(abs(number) < float("inf") for number in numbers):
            self.fail("non_finite")
        return numbers

    def to_internal_value(self, data):
        data = str(data).strip()
        if not self.matrix:
            return self._row(data, data)
        rows = [self._row(row, data) for row in data.split(";")]
        if len({len(row) for row in rows}) != 1:
            self.fail("ragged")
        return rows

    def to_representation(self, value):
        if self.matrix:
            return "; ".join(", ".join(repr(v) for v in row) for row in value)
        return ", ".join(repr(v) for v in value)


class ExpressionField(serializers.CharField):
    """A coefficient expression checked by ``parser`` (weight or endowment rate)."""

    def __init__(self, parser, **kwargs):
        self.parser = parser
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        text = super().to_internal_value(data)
        try:
            self.parser(text)
        except (ValueError, OptimaError) as exc:
            raise serializers.ValidationError(str(exc)) from exc
        return text


class SectionSerializer(serializers.Serializer):
    """Rejects keys it does not declare."""

    def to_internal_value(self, data):
        unknown = sorted(set(data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({key: ["Unknown key."] for key in unknown})
        return super().to_internal_value(data)


class MarketSection(SectionSerializer):
    n_stocks = serializers.IntegerField(min_value=1)
    n_brownian = serializers.IntegerField(min_value=1)
    rate = serializers.FloatField()
    drift = DecimalVectorField()
    volatility = DecimalVectorField(matrix=True)
    dividend = DecimalVectorField(required=False)
    initial_prices = DecimalVectorField()
    horizon = serializers.FloatField(min_value=0.0)

    def validate(self, attrs):
        n, d = attrs["n_stocks"], attrs["n_brownian"]
        errors = {}
        if len(attrs["drift"]) != n:
            errors["drift"] = [f"Expected {n} values."]
        if len(attrs["volatility"]) != n or len(attrs["volatility"][0]) != d:
            errors["volatility"] = [f"Expected {n} rows of {d} values."]
        if "dividend" in attrs and len(attrs["dividend"]) != n:
            errors["dividend"] = [f"Expected {n} values."]
        if len(attrs["initial_prices"]) != n + 1:
            errors["initial_prices"] = [f"Expected n+1 = {n + 1} values (coordinate 0 is the bond)."]
        elif min(attrs["initial_prices"]) <= 0:
            errors["initial_prices"] = ["Prices must be strictly positive."]
        if attrs["horizon"] <= 0:
            errors["horizon"] = ["Horizon must be positive."]
        if errors:
            raise serializers.ValidationError(errors)
        return attrs


class PreferenceSection(SectionSerializer):
    family = serializers.ChoiceField(choices=["log", "power", "separable"])
    alpha = serializers.FloatField(required=False)
    utility = serializers.ChoiceField(choices=["log", "power"], required=False)
    h = ExpressionField(parse_weight, default="constant:1")
    bequest_weight = serializers.FloatField(min_value=0.0, default=0.0)

    def validate(self, attrs):
        needs_alpha = attrs["family"] == "power" or (
            attrs["family"] == "separable" and attrs.get("utility") == "power"
        )
        if attrs["family"] == "separable" and "utility" not in attrs:
            raise serializers.ValidationError({"utility": ["Required for the separable family."]})
        if needs_alpha:
            alpha = attrs.get("alpha")
            if alpha is None:
                raise serializers.ValidationError({"alpha": ["Required for a power utility."]})
            if not 0.0 < alpha < 1.0:
                raise serializers.ValidationError({"alpha": ["Must lie in (0, 1)."]})
        elif "alpha" in attrs:
            raise serializers.ValidationError({"alpha": ["Only used with a power utility."]})
        return attrs


class EndowmentSection(SectionSerializer):
    rate = ExpressionField(parse_rate, required=False)
    mode = serializers.ChoiceField(choices=[VarPi.CLOSED_FORM, VarPi.MONTE_CARLO], required=False)
    mc_inner_paths = serializers.IntegerField(min_value=2, required=False)
    mc_steps = serializers.IntegerField(min_value=1, required=False)
    mc_seed = serializers.IntegerField(min_value=0, default=0)
    cache_time_nodes = serializers.IntegerField(min_value=0, default=0)
    cache_price_nodes = serializers.IntegerField(min_value=2, default=9)
    cache_price_span = serializers.FloatField(min_value=1.0, default=3.0)


class ProblemSection(SectionSerializer):
    kind = serializers.ChoiceField(choices=[kind.value for kind in ProblemKind], default=ProblemKind.BOTH.value)
    x = serializers.FloatField()
    start = serializers.FloatField(min_value=0.0, default=0.0)
    steps = serializers.IntegerField(min_value=1, default=100)
    n_paths = serializers.IntegerField(min_value=1, default=1000)
    seed = serializers.IntegerField(min_value=0, default=0)


class TolerancesSection(SectionSerializer):
    counts = ("max_iter", "mc_inner_paths", "mc_steps", "min_test_paths")

    def get_fields(self):
        # one optional number per solver default
        return {
            name: serializers.IntegerField(required=False, min_value=1) if name in self.counts
            else serializers.FloatField(required=False, min_value=0.0)
            for name in settings.OPTIMA
        }


class OutputSection(SectionSerializer):
    directory = serializers.CharField(default="out")
    write_paths = serializers.BooleanField(default=True)


class VerifySection(SectionSerializer):
    paths_file = serializers.CharField(required=False)
    inject_violation = serializers.BooleanField(default=False)
    z_crit = serializers.FloatField(min_value=0.0, required=False)
    homogeneity_tol = serializers.FloatField(min_value=0.0, default=1e-9)


class OracleSection(SectionSerializer):
    n_periods = serializers.IntegerField(min_value=1, max_value=MAX_BINOMIAL_PERIODS, default=2)
    up = serializers.FloatField(default=1.2)
    down = serializers.FloatField(min_value=0.0, default=0.9)
    rate = serializers.FloatField(default=0.0)
    p_up = serializers.FloatField(default=0.5)


class RunConfigSerializer(SectionSerializer):
    """A whole run configuration, one nested serializer per section."""
    market = MarketSection()
    preference = PreferenceSection()
    endowment = EndowmentSection(required=False)
    problem = ProblemSection()
    tolerances = TolerancesSection(required=False)
    output = OutputSection(required=False)
    verify = VerifySection(required=False)
    oracle = OracleSection(required=False)

    def validate(self, attrs):
        start, horizon = attrs["problem"]["start"], attrs["market"]["horizon"]
        if start >= horizon:
            raise serializers.ValidationError({"problem": {"start": [f"Must be below the horizon {horizon}."]}})
        return attrs

    def section(self, name):
        return self.validated_data.get(name) or self.fields[name].run_validation({})

    @property
    def kind(self):
        return ProblemKind(self.validated_data["problem"]["kind"])

    def build_market(self):
        data = self.validated_data["market"]
        return MarketSpec.constant(
            rate=data["rate"],
            drift=data["drift"],
            volatility=data["volatility"],
            dividend=data.get("dividend"),
            initial_prices=data["initial_prices"],
            horizon=data["horizon"],
        )

    def build_preference(self):
        data = self.validated_data["preference"]
        horizon = self.validated_data["market"]["horizon"]
        h = parse_weight(data["h"])
        if data["family"] == "log":
            return LogPreference(h, data["bequest_weight"], horizon)
        if data["family"] == "power":
            return PowerPreference(data["alpha"], h, data["bequest_weight"], horizon)
        utility = LogUtility() if data["utility"] == "log" else PowerUtility(data["alpha"])
        return SeparablePreference(utility, h, data["bequest_weight"], horizon)

    def build_endowment(self):
        data = self.section("endowment")
        if "rate" not in data:
            return EndowmentModel.zero()
        rate = parse_rate(data["rate"])
        kind = EndowmentKind.DETERMINISTIC if rate.price_free else EndowmentKind.MARKOV
        return EndowmentModel(
            rate_fn=rate, kind=kind, mc_inner_paths=data.get("mc_inner_paths"),
            mc_seed=data["mc_seed"], mc_steps=data.get("mc_steps"),
        )
