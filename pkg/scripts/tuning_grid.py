"""The lambda / learning-rate grid searched for the shipped Syn(1,1) configs.

Runs each cell on the given seeds and prints mean accuracy, so the chosen
values can be re-derived. Defaults reproduce the published search; it takes a
few minutes per strategy.

    python3 scripts/tuning_grid.py --config configs/syn11_fedprox_upcycled.toml
"""

import argparse
import json
from pathlib import Path

from upcycled_fl import harness

ROOT = Path(__file__).resolve().parents[1]
GRID = {
    "solver.learning_rate": [0.01, 0.03],
    "upcycled.lambda0": [0.1, 0.2, 0.43, 1.0],
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "syn11_fedprox_upcycled.toml")
    ap.add_argument("--out", type=Path, default=ROOT / "runs" / "grid")
    ap.add_argument("--seeds", type=int, nargs="*", default=[0, 1, 2, 3])
    args = ap.parse_args(argv)

    base = harness.parse_config(args.config)
    base.run.seeds = list(args.seeds)
    rows = []
    for label, cfg in harness.expand_grid(base, GRID):
        report = harness.run_suite(cfg, args.out / args.config.stem / label)
        mean, std = report.accuracy
        rows.append({"cell": label, "mean": mean, "std": std})
        print(f"{label:50s} {mean:.4f}")
    best = max(rows, key=lambda r: r["mean"])
    print(f"best: {best['cell']} ({best['mean']:.4f})")
    (args.out / args.config.stem).mkdir(parents=True, exist_ok=True)
    (args.out / args.config.stem / "grid.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
