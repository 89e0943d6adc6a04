"""Non-private accuracy table: Syn(iid) and Syn(1,1), baselines vs upcycled.

    python3 scripts/accuracy_table.py [--out runs/accuracy_table] [--seeds 0 1 2 3]
"""

import argparse
import json
from pathlib import Path

from upcycled_fl import harness

ROOT = Path(__file__).resolve().parents[1]
ROWS = [
    ("Syn(iid)", "Upcycled-FedProx", "syn_iid_upcycled_fedprox"),
    ("Syn(1,1)", "FedProx", "syn11_fedprox_baseline"),
    ("Syn(1,1)", "Upcycled-FedProx", "syn11_fedprox_upcycled"),
    ("Syn(1,1)", "FedAvg", "syn11_fedavg_baseline"),
    ("Syn(1,1)", "Upcycled-FedAvg", "syn11_fedavg_upcycled"),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=ROOT / "runs" / "accuracy_table")
    ap.add_argument("--seeds", type=int, nargs="*")
    args = ap.parse_args(argv)

    table = []
    for dataset, method, name in ROWS:
        cfg = harness.parse_config(ROOT / "configs" / f"{name}.toml")
        if args.seeds:
            cfg.run.seeds = list(args.seeds)
        report = harness.run_suite(cfg, args.out / name)
        mean, std = report.accuracy
        table.append({"dataset": dataset, "method": method, "config": name, "mean": mean, "std": std,
                      "completed": report.ok})

    print("| dataset | method | accuracy (%) |")
    print("|---|---|---|")
    for row in table:
        std = f" ± {100 * row['std']:.2f}" if row["std"] is not None else ""
        print(f"| {row['dataset']} | {row['method']} | {100 * row['mean']:.2f}{std} |")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "table.json").write_text(json.dumps(table, indent=2) + "\n")


if __name__ == "__main__":
    main()
