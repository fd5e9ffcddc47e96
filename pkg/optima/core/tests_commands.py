import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from .runs import MANIFEST, load_config
from .exceptions import ConfigError
from .signals import RUN_INDEX

CONFIGS = Path(settings.BASE_DIR) / "configs"


class BaseCommandTestCase(SimpleTestCase):
    """
    Base class for management command tests.
    Every test gets a scratch directory; configs are either the shipped ones
    under configs/ or variants written into the scratch directory.
    """
    def setUp(self):
        super().setUp()
        scratch = tempfile.TemporaryDirectory()
        self.addCleanup(scratch.cleanup)
        self.tmp = Path(scratch.name)

    def shipped(self, name):
        return CONFIGS / name

    def variant(self, name, replacements=(), extra=""):
        """Copy a shipped config with some lines replaced and extra text appended."""
        text = self.shipped(name).read_text(encoding="utf-8")
        for old, new in replacements:
            self.assertIn(old, text)
            text = text.replace(old, new)
        path = self.tmp / f"variant-{name}"
        path.write_text(text + extra, encoding="utf-8")
        return path

    def run_command(self, command, config, out="out", **options):
        stdout = StringIO()
        call_command(command, config=str(config), out=str(self.tmp / out), stdout=stdout, **options)
        return stdout.getvalue()

    def assert_exit(self, code, command, config, **options):
        with self.assertRaises(CommandError) as cm:
            self.run_command(command, config, **options)
        self.assertEqual(cm.exception.returncode, code)
        return str(cm.exception)

    def manifest(self, out="out"):
        return json.loads((self.tmp / out / MANIFEST).read_text(encoding="utf-8"))


class SolveCommandTests(BaseCommandTestCase):

    def test_log_consumption(self):
        output = self.run_command("solve", self.shipped("log_consumption.ini"), paths=200)
        self.assertIn("branch=interior", output)
        for name in (MANIFEST, "solution.csv", "paths.csv", RUN_INDEX):
            self.assertTrue((self.tmp / "out" / name).exists(), msg=name)
        manifest = self.manifest()
        self.assertAlmostEqual(manifest["results"]["V"], -1.386294, places=6)
        self.assertAlmostEqual(manifest["results"]["Y"], 2.0, places=12)
        self.assertEqual(manifest["overrides"]["problem.n_paths"], "200")
        self.assertIn("[preference]", manifest["config_text"])
        self.assertEqual(len(manifest["assumptions"]), 3)

    def test_solution_table(self):
        self.run_command("solve", self.shipped("log_consumption.ini"), paths=100)
        table = pd.read_csv(self.tmp / "out" / "solution.csv")
        self.assertEqual(len(table), 101)
        self.assertAlmostEqual(table["mean_wealth"].iloc[0], 1.0, places=12)
        # Merton fraction 0.06 / 0.09 of wealth in the stock
        self.assertAlmostEqual(table["mean_pi_1"].iloc[0], 2.0 / 3.0, places=12)

    def test_floor_branch_is_recorded(self):
        config = self.variant("endowment.ini", [("x = 1.0", "x = -1.5")])
        self.run_command("solve", config, paths=50)
        results = self.manifest()["results"]
        self.assertEqual(results["branch"], "floor")
        self.assertEqual(results["V"], "-inf")
        self.assertIsNone(results["Y"])

    def test_summary_table(self):
        self.run_command("solve", self.shipped("log_consumption.ini"), paths=50)
        summary = pd.read_csv(self.tmp / "out" / "summary.csv")
        self.assertEqual(len(summary), 1)
        self.assertEqual(list(summary.columns[:4]), ["x", "Y", "V", "branch"])
        self.assertAlmostEqual(summary["V"].iloc[0], -1.386294, places=6)
        self.assertAlmostEqual(summary["Y"].iloc[0], 2.0, places=12)
        self.assertEqual(summary["branch"].iloc[0], "interior")
        self.assertIn("summary.csv", self.manifest()["files"])

    def test_price_income_uses_cache(self):
        config = self.variant(
            "endowment.ini", [("rate = constant:1", "rate = linear_in:P1,1\nmc_inner_paths = 200\nmc_steps = 10")],
        )
        self.run_command("solve", config, paths=30)
        self.assertEqual(self.manifest()["results"]["varpi_cache"], "11x9")
        table = pd.read_csv(self.tmp / "out" / "solution.csv")
        self.assertEqual(len(table), 51)
        self.assertTrue(np.all(np.isfinite(table["mean_wealth"])))

    def test_malformed_value_reports_line(self):
        config = self.variant("log_consumption.ini", [("x = 1.0", "x = abc")])
        line = config.read_text(encoding="utf-8").splitlines().index("x = abc") + 1
        message = self.assert_exit(2, "solve", config)
        self.assertIn(f"{config}:{line}: [problem] x:", message)

    def test_unknown_key_rejected(self):
        config = self.variant("log_consumption.ini", [("x = 1.0", "x = 1.0\ncolour = red")])
        message = self.assert_exit(2, "solve", config)
        self.assertIn("[problem] colour", message)

    def test_unknown_section_rejected(self):
        config = self.variant("log_consumption.ini", extra="\n[extras]\nanswer = 42\n")
        message = self.assert_exit(2, "solve", config)
        self.assertIn("[extras]", message)

    def test_missing_config(self):
        self.assert_exit(2, "solve", self.tmp / "nowhere.ini")

    def test_power_family_needs_alpha(self):
        config = self.variant("log_consumption.ini", [("family = log", "family = power")])
        self.assert_exit(2, "solve", config)


class SimulateCommandTests(BaseCommandTestCase):

    def test_same_seed_same_file(self):
        config = self.shipped("power_both.ini")
        self.run_command("simulate", config, out="first", paths=64, seed=5)
        self.run_command("simulate", config, out="second", paths=64, seed=5)
        first = (self.tmp / "first" / "paths.csv").read_bytes()
        second = (self.tmp / "second" / "paths.csv").read_bytes()
        self.assertEqual(first, second)

    def test_seed_changes_paths(self):
        config = self.shipped("power_both.ini")
        self.run_command("simulate", config, out="first", paths=16, seed=5)
        self.run_command("simulate", config, out="second", paths=16, seed=6)
        self.assertNotEqual(
            (self.tmp / "first" / "paths.csv").read_bytes(), (self.tmp / "second" / "paths.csv").read_bytes(),
        )

    def test_flat_market_has_unit_deflator(self):
        config = self.variant("log_consumption.ini", [("rate = 0.04", "rate = 0.0"), ("drift = 0.10", "drift = 0.0")])
        self.run_command("simulate", config, paths=20)
        frame = pd.read_csv(self.tmp / "out" / "paths.csv")
        np.testing.assert_array_equal(frame["H"].to_numpy(), 1.0)
        self.assertEqual(list(frame.columns), ["time", "path_id", "P_1", "B", "Z", "H"])

    def test_run_index_is_appended(self):
        config = self.shipped("log_consumption.ini")
        self.run_command("simulate", config, paths=10)
        self.run_command("simulate", config, paths=10)
        lines = (self.tmp / "out" / RUN_INDEX).read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 2)
        self.assertEqual(json.loads(lines[-1])["command"], "simulate")


class VerifyCommandTests(BaseCommandTestCase):

    def test_reference_configuration_passes(self):
        output = self.run_command("verify", self.shipped("log_consumption.ini"))
        self.assertIn("budget_martingale", output)
        checks = pd.read_csv(self.tmp / "out" / "checks.csv")
        self.assertEqual(checks.loc[checks["verdict"] == "fail"].shape[0], 0)
        self.assertEqual(self.manifest()["results"]["failed"], [])

    def test_injected_violation_exits_one(self):
        self.assert_exit(1, "verify", self.shipped("violation.ini"))
        checks = pd.read_csv(self.tmp / "out" / "checks.csv").set_index("name")
        self.assertEqual(checks.loc["budget_martingale", "verdict"], "fail")
        self.assertEqual(checks.loc["negative_control", "verdict"], "pass")

    def test_price_income_control_passes(self):
        config = self.variant(
            "endowment.ini", [("rate = constant:1", "rate = linear_in:P1,1\nmc_inner_paths = 2000\nmc_steps = 10")],
        )
        try:
            self.run_command("verify", config)
        except CommandError as e:
            self.assertEqual(e.returncode, 1)
        checks = pd.read_csv(self.tmp / "out" / "checks.csv").set_index("name")
        self.assertEqual(checks.loc["negative_control", "verdict"], "pass")
        self.assertIn("20 pairs", checks.loc["nested_floor", "detail"])

    def test_missing_paths_file_exits_two(self):
        config = self.variant("log_consumption.ini", extra=f"\n[verify]\npaths_file = {self.tmp / 'missing.csv'}\n")
        message = self.assert_exit(2, "verify", config)
        self.assertIn("paths_file", message)

    def test_paths_file_is_reused(self):
        config = self.shipped("log_consumption.ini")
        self.run_command("simulate", config, out="sim", paths=1000)
        variant = self.variant(
            "log_consumption.ini", extra=f"\n[verify]\npaths_file = {self.tmp / 'sim' / 'paths.csv'}\n",
        )
        self.run_command("verify", variant)
        names = pd.read_csv(self.tmp / "out" / "checks.csv")["name"].tolist()
        self.assertNotIn("restart_consistency", names)
        self.assertIn("budget_martingale", names)


class OracleCommandTests(BaseCommandTestCase):

    def test_log_two_periods(self):
        self.run_command("oracle", self.shipped("oracle_log.ini"))
        results = self.manifest()["results"]
        self.assertLessEqual(results["abs_dV"], 1e-8)
        self.assertAlmostEqual(results["V_oracle"], 0.0, places=10)
        self.assertTrue((self.tmp / "out" / "oracle.csv").exists())

    def test_power_three_periods(self):
        config = self.variant(
            "oracle_log.ini",
            [("family = log", "family = power\nalpha = 0.5"), ("x = 1.0", "x = 0.25"), ("n_periods = 2", "n_periods = 3")],
        )
        self.run_command("oracle", config)
        self.assertLessEqual(self.manifest()["results"]["abs_dV"], 1e-8)

    def test_too_many_periods(self):
        config = self.variant("oracle_log.ini", [("n_periods = 2", "n_periods = 5")])
        message = self.assert_exit(2, "oracle", config)
        self.assertIn("[oracle] n_periods", message)

    def test_endowment_refused(self):
        self.assert_exit(2, "oracle", self.shipped("endowment.ini"))

    def test_arbitrage_tree_refused(self):
        config = self.variant("oracle_log.ini", [("down = 0.9", "down = 1.1")])
        self.assert_exit(2, "oracle", config)


class LoadConfigTests(BaseCommandTestCase):

    def test_defaults_and_overrides(self):
        config = load_config(self.shipped("oracle_log.ini"), seed=9, out=self.tmp / "elsewhere")
        self.assertEqual(config.data["problem"]["seed"], 9)
        self.assertEqual(config.data["problem"]["steps"], 100)
        self.assertEqual(config.out_dir, self.tmp / "elsewhere")
        self.assertEqual(config.section("verify")["inject_violation"], False)
        self.assertEqual(config.tolerances["z_crit"], settings.OPTIMA["z_crit"])

    def test_tolerance_override(self):
        config = load_config(self.variant("oracle_log.ini", extra="\n[tolerances]\nz_crit = 4.0\n"))
        self.assertEqual(config.tolerances["z_crit"], 4.0)

    def test_start_must_precede_horizon(self):
        with self.assertRaises(ConfigError):
            load_config(self.variant("oracle_log.ini", [("x = 1.0", "x = 1.0\nstart = 1.0")]))
