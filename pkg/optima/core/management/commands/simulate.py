from core.market import simulate_paths
from core.runs import RunCommand, finish


class Command(RunCommand):
    help = "Simulate prices, bond, exponential martingale and deflator; writes paths.csv."

    def run(self, config):
        market, _, _, _ = config.build()
        problem = config.data["problem"]
        bundle = simulate_paths(market, config.grid(), None, problem["n_paths"], problem["seed"])
        out_dir = config.out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        bundle.to_csv(out_dir / "paths.csv")
        results = {
            "n_paths": bundle.n_paths,
            "n_steps": bundle.grid.n_steps,
            "seed": bundle.seed,
            "mean_terminal_expmart": float(bundle.expmart[:, -1].mean()),
        }
        finish(config, "simulate", results, ["paths.csv"])
        self.stdout.write(f"Wrote {bundle.n_paths} paths to {out_dir / 'paths.csv'}")
