"""Run the diagnostics config and report B_hat, L_hat, C1..C3 and the bound check.

    python3 scripts/convergence_diagnostics.py [--probes 20] [--out runs/diagnostics]
"""

import argparse
from pathlib import Path

from upcycled_fl import harness

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "syn_iid_diagnostics.toml")
    ap.add_argument("--out", type=Path, default=ROOT / "runs" / "diagnostics")
    ap.add_argument("--probes", type=int, default=20)
    args = ap.parse_args(argv)

    harness.run_suite(harness.parse_config(args.config), args.out)
    diag = harness.analyze_suite(args.out, probe_count=args.probes)
    print(f"empirical f* = {diag['empirical_f_star']:.4f}")
    for seed, e in sorted(diag["seeds"].items()):
        line = f"seed {seed}: L_hat {e['L_hat']:.3f}  B_hat {e['B_hat']:.3f}  K {e['K']}"
        if e.get("bound"):
            line += (f"  C1 {e['C1']:.3f}  min|grad|^2 {e['min_grad_norm_sq']:.2e}"
                     f"  bound {e['bound']['total']:.3f}  holds {e['bound_holds']}")
        elif "C1" in e:
            line += f"  C1 {e['C1']:.3f} (bound not applicable)"
        print(line)
    print(f"written to {args.out / 'diagnostics.json'}")


if __name__ == "__main__":
    main()
