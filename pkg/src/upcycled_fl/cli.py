"""Command-line entry point: ``upcycled-fl <subcommand>``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, privacy
from .data import SizeSpec, generate_synthetic, save_dataset, split_train_test
from .errors import UpcycledError


def _generate(args) -> int:
    size = SizeSpec.fixed(args.size) if args.size else SizeSpec()
    ds = generate_synthetic(args.beta, args.gamma, args.iid, args.devices, args.dimx, args.classes, size, args.seed)
    if args.test_fraction > 0:
        ds = split_train_test(ds, args.test_fraction, args.seed)
    save_dataset(ds, args.out)
    n_train = sum(d.n_train for d in ds)
    n_test = sum(d.n_test for d in ds)
    print(json.dumps({"out": str(args.out), "devices": len(ds), "train": n_train, "test": n_test}))
    return 0


def _run(args) -> int:
    cfg = harness.parse_config(args.config)
    if args.seed is not None:
        cfg.run.seeds = [args.seed]
    out = Path(args.out or cfg.run.out_dir)
    report = harness.run_suite(cfg, out)
    acc, std = report.accuracy
    print(json.dumps({"out": str(out), "accuracy_mean": acc, "accuracy_std": std, "completed": report.ok}))
    return 0 if report.ok else 1


def _grid(args) -> int:
    base = harness.parse_config(args.config)
    overrides = {}
    for item in args.set or []:
        key, _, values = item.partition("=")
        overrides[key.strip()] = harness.parse_override_values(values)
    out = Path(args.out)
    ok = True
    for label, cfg in harness.expand_grid(base, overrides):
        cell = out / label
        cell.mkdir(parents=True, exist_ok=True)
        (cell / "config.toml").write_text(cfg.to_toml())
        if args.execute:
            report = harness.run_suite(cfg, cell)
            ok = ok and report.ok
            acc, std = report.accuracy
            print(json.dumps({"cell": label, "accuracy_mean": acc, "accuracy_std": std}))
        else:
            print(json.dumps({"cell": label, "config": str(cell / "config.toml")}))
    return 0 if ok else 1


def _accountant(args) -> int:
    if args.mechanism == "output":
        q = privacy.output_q(args.rounds, args.tau, args.sigma, args.samples)
        if args.eps is not None:
            delta = privacy.output_delta_of_eps(args.rounds, args.tau, args.sigma, args.samples, args.eps)
            result = {"mechanism": "output", "eps": args.eps, "delta": delta, "q": q}
        else:
            eps = privacy.output_eps_of_delta(args.rounds, args.tau, args.sigma, args.samples, args.delta)
            result = {"mechanism": "output", "eps": eps, "delta": args.delta, "q": q}
    else:
        alphas = args.alpha or []
        if len(alphas) == 1 and args.rounds:
            alphas = alphas * int(args.rounds)
        eps = privacy.objective_eps(alphas, args.u1, args.u2, args.samples, args.mu)
        result = {"mechanism": "objective", "eps": eps, "delta": 0.0, "rounds": len(alphas)}
    print(json.dumps(result))
    return 0


def _analyze(args) -> int:
    out = harness.analyze_suite(args.run, probe_count=args.probes)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _compare(args) -> int:
    report = harness.compare(harness.load_summary(args.baseline), harness.load_summary(args.upcycled))
    text = json.dumps(report.to_json(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="upcycled-fl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="generate a synthetic federated dataset (JSON lines)")
    g.add_argument("--beta", type=float, default=0.0)
    g.add_argument("--gamma", type=float, default=0.0)
    g.add_argument("--iid", action="store_true")
    g.add_argument("--devices", type=int, default=30)
    g.add_argument("--dimx", type=int, default=20)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=0, help="fixed samples per device (default: lognormal)")
    g.add_argument("--test-fraction", type=float, default=0.1)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=_generate)

    r = sub.add_parser("run", help="run a configured multi-seed experiment")
    r.add_argument("--config", type=Path, required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", type=Path)
    r.set_defaults(func=_run)

    gr = sub.add_parser("grid", help="expand config overrides into a suite directory")
    gr.add_argument("--config", type=Path, required=True)
    gr.add_argument("--set", action="append", metavar="SECTION.KEY=V1,V2")
    gr.add_argument("--out", type=Path, required=True)
    gr.add_argument("--execute", action="store_true", help="run every cell, not just write configs")
    gr.set_defaults(func=_grid)

    a = sub.add_parser("accountant", help="closed-form privacy loss")
    a.add_argument("--mechanism", choices=["output", "objective"], required=True)
    a.add_argument("--rounds", type=float, default=0, help="data-touching rounds M")
    a.add_argument("--tau", type=float, default=1.0)
    a.add_argument("--sigma", type=float, default=1.0)
    a.add_argument("--samples", type=float, required=True, help="client dataset size |D_i|")
    a.add_argument("--delta", type=float, default=1e-5)
    a.add_argument("--eps", type=float, help="output mechanism: report delta for this eps instead")
    a.add_argument("--alpha", type=float, action="append", help="per-round alpha (repeat, or give once with --rounds)")
    a.add_argument("--u1", type=float, default=2**0.5)
    a.add_argument("--u2", type=float, default=0.5)
    a.add_argument("--mu", type=float, default=0.5)
    a.set_defaults(func=_accountant)

    an = sub.add_parser("analyze", help="convergence diagnostics for a finished suite")
    an.add_argument("--run", type=Path, required=True)
    an.add_argument("--probes", type=int, default=20)
    an.set_defaults(func=_analyze)

    c = sub.add_parser("compare", help="paired comparison of two suites")
    c.add_argument("baseline", type=Path)
    c.add_argument("upcycled", type=Path)
    c.add_argument("--out", type=Path)
    c.set_defaults(func=_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UpcycledError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
