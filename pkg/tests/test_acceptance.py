"""Acceptance criteria, one test (or a small group) per criterion.

Each check is logged through the ``criterion`` fixture; the terminal summary
prints one PASS/FAIL line per criterion. The suite-level runs use the shipped
configs in ``configs/`` unchanged.
"""

import dataclasses
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from upcycled_fl import analysis, harness
from upcycled_fl.data import DeviceShard, FederatedDataset, SizeSpec, generate_synthetic
from upcycled_fl.flcore import CoefficientSchedule, Simulation
from upcycled_fl.models import LocalObjective, ModelVector, gradient, loss, random_model
from upcycled_fl.privacy import (
    clip,
    gaussian_perturb,
    objective_eps,
    output_delta_of_eps,
    output_eps_of_delta,
    sample_exp_norm_noise,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
EPS_ORACLE = 0.34180702122075558989  # 50-digit mpmath evaluation, q = 0.0025, delta = 1e-5

pytestmark = pytest.mark.slow


def cfg(name):
    return harness.parse_config(CONFIGS / f"{name}.toml")


@pytest.fixture(scope="module")
def suites(tmp_path_factory):
    """Run each shipped config at most once per session."""
    cache = {}

    def get(name):
        if name not in cache:
            out = tmp_path_factory.mktemp(name)
            tic = time.perf_counter()
            report = harness.run_suite(cfg(name), out)
            cache[name] = (report, time.perf_counter() - tic, out)
        return cache[name]

    return get


def test_1_syn_iid_accuracy_and_runtime(suites, criterion):
    report, elapsed, _ = suites("syn_iid_upcycled_fedprox")
    acc, std = report.accuracy
    criterion(1, report.ok and acc >= 0.94, f"mean acc {acc:.4f} (std {std:.4f}) >= 0.94")
    criterion(1, elapsed <= 180.0, f"runtime {elapsed:.1f}s <= 180s")


@pytest.mark.parametrize("strategy", ["fedprox", "fedavg"])
def test_2_heterogeneous_ordering(suites, criterion, strategy):
    base, _, _ = suites(f"syn11_{strategy}_baseline")
    upc, _, _ = suites(f"syn11_{strategy}_upcycled")
    b, u = base.accuracy[0], upc.accuracy[0]
    criterion(2, u >= b - 0.005, f"{strategy}: upcycled {u:.4f} >= baseline {b:.4f} - 0.005")


def test_3_even_round_equivalence(criterion):
    c = cfg("syn_iid_upcycled_fedprox")
    worst, n_even = 0.0, 0
    for seed in c.run.seeds:
        spec = dataclasses.replace(c.run_spec(seed), check_even_form=True)
        for rec in Simulation(c.build_dataset(seed), spec).rounds():
            if rec.parity == "even":
                worst = max(worst, rec.even_form_gap)
                n_even += 1
    criterion(3, n_even == 80 * len(c.run.seeds) and worst <= 1e-10,
              f"max gap {worst:.2e} over {n_even} even rounds <= 1e-10")


def _odd_globals(dataset, spec):
    sim = Simulation(dataset, spec)
    out = []
    for rec in sim.rounds():
        if rec.parity == "odd":
            out.append(sim.global_model.values.copy())
    return out


def test_4_zero_coefficient_degenerates_to_baseline(criterion):
    c = cfg("syn_iid_upcycled_fedprox")
    equal, total = 0, 0
    for seed in c.run.seeds[:2]:
        ds = c.build_dataset(seed)
        upc = dataclasses.replace(c.run_spec(seed), schedule=CoefficientSchedule(mode="fixed", c0=0.0))
        base = dataclasses.replace(c.run_spec(seed), upcycled=False, rounds=c.run.rounds // 2)
        a, b = _odd_globals(ds, upc), _odd_globals(ds, base)
        total += len(b)
        equal += sum(np.array_equal(x, y) for x, y in zip(a, b)) if len(a) == len(b) else 0
    criterion(4, equal == total == 80 * 2, f"{equal}/{total} odd-round globals bitwise equal")


def test_5a_round_trip(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        M = int(rng.integers(1, 500))
        tau, sigma = rng.uniform(0.01, 20), rng.uniform(0.05, 20)
        n = int(rng.integers(1, 5000))
        delta = 10.0 ** rng.uniform(-12, -1)
        eps = output_eps_of_delta(M, tau, sigma, n, delta)
        worst = max(worst, abs(output_delta_of_eps(M, tau, sigma, n, eps) - delta) / delta)
    criterion(5, worst <= 1e-12, f"round trip max rel err {worst:.2e} <= 1e-12")


def test_5b_worked_example(criterion):
    eps = output_eps_of_delta(50, 1.0, 1.0, 100, 1e-5)
    criterion(5, abs(eps - EPS_ORACLE) <= 1e-6, f"eps {eps:.12f} vs oracle {EPS_ORACLE:.12f}")


def test_5c_objective_example(criterion):
    total = objective_eps([10.0] * 80, 1.0, 0.25, 100, 0.5)
    term = (2 * Fraction(10) * Fraction(1, 2) + Fraction(28, 10) * Fraction(1, 4)) / (100 * Fraction(1, 2))
    exact = 80 * term
    criterion(5, exact == Fraction(1712, 100) and Fraction(total).limit_denominator(1000) == exact,
              f"objective total {total!r} == 17.12")


def test_6_output_perturbation_ordering(suites, criterion):
    base, _, _ = suites("private_output_baseline")
    upc, _, _ = suites("private_output_upcycled")
    bl, ul = base.loss[0], upc.loss[0]
    be, ue = base.eps[0], upc.eps[0]
    criterion(6, ul < bl, f"loss upcycled {ul:.4f} < baseline {bl:.4f}")
    criterion(6, ue < be, f"mean eps upcycled {ue:.4f} < baseline {be:.4f}")


def test_7_objective_perturbation_ordering(suites, criterion):
    base, _, _ = suites("private_objective_baseline")
    upc, _, _ = suites("private_objective_upcycled")
    bl, ul = base.loss[0], upc.loss[0]
    be, ue = base.eps[0], upc.eps[0]
    criterion(7, ue < be, f"mean eps upcycled {ue:.4f} < baseline {be:.4f}")
    criterion(7, ul <= 1.05 * bl, f"loss upcycled {ul:.4f} <= 1.05 x baseline {bl:.4f}")


def test_8_numerical_core(criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        d_x, C, n = int(rng.integers(1, 8)), int(rng.integers(2, 6)), int(rng.integers(1, 30))
        x = rng.standard_normal((n, d_x))
        y = rng.integers(0, C, n)
        anchor = random_model(d_x, C, rng)
        obj = LocalObjective(x, y, C, prox_mu=float(rng.uniform(0.1, 2)), prox_anchor=anchor)
        w = random_model(d_x, C, rng)
        g = gradient(obj, w).values
        h = 1e-5
        for j in range(len(g)):
            e = np.zeros_like(g)
            e[j] = h
            fd = (loss(obj, w.like(w.values + e)) - loss(obj, w.like(w.values - e))) / (2 * h)
            worst = max(worst, abs(g[j] - fd) / max(abs(fd), 1e-5))
    criterion(8, worst <= 1e-5, f"gradient vs finite differences max rel err {worst:.2e} <= 1e-5")

    outside = 0
    for _ in range(10_000):
        dim = int(rng.integers(1, 40))
        tau = float(rng.uniform(0.01, 10))
        w = ModelVector(rng.standard_normal(dim + 1) * 10.0 ** rng.uniform(-3, 3), (dim, 1))
        outside += clip(w, tau).norm() > tau * (1 + 1e-12)
    criterion(8, outside == 0, f"clip outside the ball: {outside}/10000")

    sigma, n = 0.8, 100_000
    w = ModelVector(np.array([0.5, -1.0, 2.0]), (2, 1))
    noise = np.stack([gaussian_perturb(w, sigma, rng).values for _ in range(n)]) - w.values
    var = noise.var(axis=0, ddof=1)
    ok_var = bool(np.all(np.abs(var - sigma**2) <= 3 * sigma**2 * math.sqrt(2 / (n - 1))))
    criterion(8, ok_var, f"gaussian variance {np.round(var, 4).tolist()} vs {sigma**2:.2f} within 3 SE")

    dim, alpha = 63, 10.0
    norms = np.array([np.linalg.norm(sample_exp_norm_noise(dim, alpha, rng)) for _ in range(n)])
    se = math.sqrt(dim) / alpha / math.sqrt(n)
    criterion(8, abs(norms.mean() - dim / alpha) <= 3 * se,
              f"exp-norm noise mean norm {norms.mean():.4f} vs {dim / alpha:.1f} within 3 SE ({se:.1e})")


def test_9_diagnostics(tmp_path, criterion):
    worst_b = math.inf
    for seed in range(4):
        for beta, iid in [(0.0, True), (0.0, False), (0.5, False), (1.0, False)]:
            ds = generate_synthetic(beta, beta, iid, 30, 20, 10, seed=seed)
            for w in (ModelVector.zeros(20, 10), random_model(20, 10, np.random.default_rng(seed))):
                worst_b = min(worst_b, analysis.estimate_dissimilarity(ds, w))
    criterion(9, worst_b >= 1 - 1e-9, f"min B_hat {worst_b:.6f} >= 1 - 1e-9")

    c1s = [analysis.constants(analysis.ConvergenceParams(L=L, B=0.0, mu=mu, rho=1.0, K=9))[0]
           for L, mu in [(1.0, 1.0), (3.0, 0.5), (0.2, 7.0)]]
    criterion(9, c1s == [1.0, 2.0, 1 / 7.0], f"C1(B=0) = 1/mu exactly: {c1s}")

    base = dict(L=1.0, B=1.0, mu=1.0, rho=2.0, K=9)
    sweep = [analysis.constants(analysis.ConvergenceParams(**base, lambda_m=lam)) for lam in np.linspace(0, 5, 20)]
    decreasing = all(a[1] > b[1] and a[2] > b[2] for a, b in zip(sweep, sweep[1:]))
    criterion(9, decreasing, "C2, C3 strictly decreasing over a 20-point lambda sweep")

    c = cfg("syn_iid_diagnostics")
    harness.run_suite(c, tmp_path)
    diag = harness.analyze_suite(tmp_path, probe_count=20)
    rows = []
    for seed, entry in sorted(diag["seeds"].items()):
        rows.append((seed, entry["C1"], entry["min_grad_norm_sq"], entry["bound"]["total"], entry["bound_holds"]))
    ok = all(c1 > 0 and holds for _, c1, _, _, holds in rows)
    detail = ", ".join(f"seed {s}: {g:.2e} <= {b:.3f} (C1 {c1:.3f})" for s, c1, g, b, _ in rows)
    criterion(9, ok, f"min grad norm^2 <= bound: {detail}")


class CountingShard(DeviceShard):
    reads = {"n": 0}
    _fields = {"train_x", "train_y", "test_x", "test_y"}

    def __getattribute__(self, name):
        if name in CountingShard._fields:
            CountingShard.reads["n"] += 1
        return object.__getattribute__(self, name)


def test_10_cost_asymmetry(suites, criterion):
    report, _, _ = suites("syn_iid_upcycled_fedprox")
    odd = sum(s.wall_odd for s in report.seeds)
    even = sum(s.wall_even for s in report.seeds)
    # both parities have the same number of rounds, so total ratio == mean ratio
    criterion(10, even <= 0.05 * odd, f"even/odd wall time {even / odd:.4%} <= 5%")

    c = cfg("syn_iid_upcycled_fedprox")
    ds = c.build_dataset(c.run.seeds[0])
    counted = FederatedDataset(
        tuple(CountingShard(d.device_id, d.train_x, d.train_y, d.test_x, d.test_y) for d in ds),
        ds.d_x, ds.C, ds.seed, ds.generators,
    )
    even_reads, odd_reads = 0, 0
    rounds = Simulation(counted, c.run_spec(c.run.seeds[0])).rounds()
    while True:
        before = CountingShard.reads["n"]
        rec = next(rounds, None)
        if rec is None:
            break
        delta = CountingShard.reads["n"] - before
        if rec.parity == "even":
            even_reads += delta
        else:
            odd_reads += delta
    criterion(10, even_reads == 0 and odd_reads > 0, f"dataset reads: even {even_reads}, odd {odd_reads}")
