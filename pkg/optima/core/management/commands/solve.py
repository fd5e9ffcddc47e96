import pandas as pd

from core.optimizer import solve
from core.market import simulate_paths
from core.runs import RunCommand, finish

SUMMARY_COLUMNS = ("x", "Y", "V", "branch", "kind", "start", "varpi0")


class Command(RunCommand):
    help = "Solve the configured consumption/investment problem; writes manifest.json, summary.csv and solution.csv."

    def run(self, config):
        market, pref, endowment, estimator = config.build()
        problem = config.data["problem"]
        solution = solve(
            market, pref, endowment, config.kind, problem["x"], start=problem["start"], estimator=estimator,
        )
        out_dir = config.out_dir
        out_dir.mkdir(parents=True, exist_ok=True)

        bundle = simulate_paths(market, config.grid(), None, problem["n_paths"], problem["seed"])
        # varpi along every node of every path is only affordable through the cache
        if estimator.price_dependent and estimator.interpolator is None:
            estimator.cache_along(bundle)
        table = solution.pathwise_table(bundle)
        table.to_csv(out_dir / "solution.csv", index=False)

        results = {**solution.summary(), "varpi_cache": estimator.cache_shape}
        pd.DataFrame([{name: results[name] for name in SUMMARY_COLUMNS}]).to_csv(out_dir / "summary.csv", index=False)
        files = ["summary.csv", "solution.csv"]
        if config.section("output")["write_paths"]:
            bundle.to_csv(out_dir / "paths.csv")
            files.append("paths.csv")

        finish(config, "solve", results, files)
        self.stdout.write(
            f"branch={results['branch']} Y={results['Y']!r} V={results['V']!r} (outputs in {out_dir})"
        )
