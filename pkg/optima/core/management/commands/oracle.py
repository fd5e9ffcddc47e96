import logging

import pandas as pd

from core.endowment import EndowmentKind
from core.exceptions import ConfigError, ConvergenceError, DomainError, VerificationError
from core.optimizer import value_function
from core.preferences import ConstantWeight, invert_X
from core.runs import RunCommand, finish
from core.verify import BinomialMarket, binomial_oracle, node_program_oracle

logger = logging.getLogger(__name__)

TOLERANCE = 1e-8


class Command(RunCommand):
    help = "Compare the closed-form value with the binomial-tree oracle; exits 3 if they differ by more than 1e-8."

    def run(self, config):
        _, pref, endowment, _ = config.build()
        if endowment.kind is not EndowmentKind.ZERO:
            raise ConfigError("The oracle handles zero endowments only; remove the [endowment] rate.")
        if not isinstance(pref.h, ConstantWeight):
            raise ConfigError("The oracle needs a constant weight h (constant:v).")
        options = config.section("oracle")
        try:
            tree = BinomialMarket(
                options["n_periods"], options["up"], options["down"], options["rate"], pref.horizon, options["p_up"],
            )
        except DomainError as e:
            raise ConfigError(f"[oracle] {e}") from e
        x = config.data["problem"]["x"]
        kind = config.kind

        oracle_value, plan = binomial_oracle(tree, pref, x, kind)
        try:
            node_value, _ = node_program_oracle(tree, pref, x, kind)
        except ConvergenceError as e:
            logger.warning(f"Node program did not converge: {e}")
            node_value = float("nan")
        solver_value = value_function(pref, kind, invert_X(pref, 0.0, x, kind))
        gap = abs(solver_value - oracle_value)

        table = pd.DataFrame([
            {"quantity": "V_solver", "value": solver_value},
            {"quantity": "V_oracle", "value": oracle_value},
            {"quantity": "V_node_program", "value": node_value},
            {"quantity": "abs_dV", "value": gap},
            {"quantity": "tree_pricing_error", "value": tree.pricing_error()},
            {"quantity": "y_oracle", "value": plan["y"]},
        ])
        out_dir = config.out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "oracle.csv", index=False)
        self.stdout.write(table.to_string(index=False))

        results = {"V_solver": solver_value, "V_oracle": oracle_value, "V_node_program": node_value, "abs_dV": gap}
        finish(config, "oracle", results, ["oracle.csv"])
        if gap > TOLERANCE:
            raise VerificationError(f"|V_solver - V_oracle| = {gap!r} exceeds {TOLERANCE}.")
