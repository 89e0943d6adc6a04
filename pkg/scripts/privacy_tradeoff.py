"""Private runs: final training loss and mean per-client eps, baseline vs upcycled.

Runs the four shipped private configs, then an optional sigma (output) or
alpha (objective) sweep for the upcycled arm to trace the trade-off curve.

    python3 scripts/privacy_tradeoff.py [--sweep] [--out runs/privacy]
"""

import argparse
import dataclasses
import json
from pathlib import Path

from upcycled_fl import harness

ROOT = Path(__file__).resolve().parents[1]
PAIRS = {
    "output": ("private_output_baseline", "private_output_upcycled"),
    "objective": ("private_objective_baseline", "private_objective_upcycled"),
}
SWEEP = {"output": ("sigma", [0.6, 0.8, 1.0, 1.2]), "objective": ("alpha", [10.0, 20.0, 40.0])}


def summarize(report):
    loss, loss_std = report.loss
    eps, eps_std = report.eps
    return {"loss": loss, "loss_std": loss_std, "eps": eps, "eps_std": eps_std, "completed": report.ok}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=ROOT / "runs" / "privacy")
    ap.add_argument("--sweep", action="store_true")
    args = ap.parse_args(argv)

    results = {}
    for mech, names in PAIRS.items():
        for name in names:
            cfg = harness.parse_config(ROOT / "configs" / f"{name}.toml")
            results[name] = summarize(harness.run_suite(cfg, args.out / name))
            r = results[name]
            print(f"{name:30s} loss {r['loss']:.4f}  mean eps {r['eps']:.4f}")
        if args.sweep:
            key, values = SWEEP[mech]
            base = harness.parse_config(ROOT / "configs" / f"{names[1]}.toml")
            for v in values:
                cfg = dataclasses.replace(base, privacy=dataclasses.replace(base.privacy, **{key: v}))
                label = f"{names[1]}__{key}={v}"
                results[label] = summarize(harness.run_suite(cfg, args.out / label))
                r = results[label]
                print(f"{label:30s} loss {r['loss']:.4f}  mean eps {r['eps']:.4f}")

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "tradeoff.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
