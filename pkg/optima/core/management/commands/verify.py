import pandas as pd
from django.core.management.base import CommandError

from core.exceptions import ConfigError
from core.market import bundle_from_csv
from core.runs import RunCommand, finish
from core.verify import run_diagnostics


class Command(RunCommand):
    help = "Run the diagnostic suite; exits 1 if any check fails."

    def load_paths(self, config, market):
        paths_file = config.section("verify").get("paths_file")
        if not paths_file:
            return None
        try:
            bundle = bundle_from_csv(paths_file, seed=config.data["problem"]["seed"])
        except FileNotFoundError as e:
            raise ConfigError(f"[verify] paths_file: {paths_file} does not exist.") from e
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"[verify] paths_file: cannot read {paths_file}: {e}") from e
        if bundle.log_prices.shape[2] != market.n_stocks:
            raise ConfigError(f"[verify] paths_file has {bundle.log_prices.shape[2]} stocks, market has {market.n_stocks}.")
        return bundle

    def run(self, config):
        market, pref, endowment, estimator = config.build()
        problem = config.data["problem"]
        options = config.section("verify")
        bundle = self.load_paths(config, market)
        rows = run_diagnostics(
            market, pref, endowment, config.kind, problem["x"], config.grid(),
            n_paths=problem["n_paths"], seed=problem["seed"], bundle=bundle, estimator=estimator,
            inject_violation=options["inject_violation"], z_crit=options.get("z_crit"),
            homogeneity_tol=options["homogeneity_tol"],
        )
        table = pd.DataFrame(
            [{"name": r.name, "statistic": r.statistic, "threshold": r.threshold, "verdict": r.verdict,
              "detail": r.detail} for r in rows]
        )
        out_dir = config.out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "checks.csv", index=False)
        self.stdout.write(table[["name", "statistic", "threshold", "verdict"]].to_string(index=False))

        failed = table.loc[table["verdict"] == "fail", "name"].tolist()
        finish(config, "verify", {"checks": len(rows), "failed": failed}, ["checks.csv"])
        if failed:
            raise CommandError(f"{len(failed)} check(s) failed: {', '.join(failed)}", returncode=1)
