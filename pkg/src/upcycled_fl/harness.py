"""Experiment orchestration: TOML configs, multi-seed suites, reports.

A suite directory looks like::

    out/
      summary.json
      seed_0/rounds.csv
      seed_0/checkpoints.json   # only with run.checkpoint_every > 0
      seed_1/...
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .data import SizeSpec, generate_synthetic, load_dataset, normalize_features, split_train_test
from .errors import ConfigError, ContractError, UpcycledError
from .flcore import (
    COEFFICIENT_MODES,
    COMPARISON_MODES,
    STRATEGIES,
    CoefficientSchedule,
    PrivacySpec,
    RunSpec,
    Simulation,
    StrategySpec,
)
from .models import SolverSpec
from .privacy import ObjectiveNoiseSpec, OutputNoiseSpec

CSV_COLUMNS = ["round", "parity", "train_loss", "test_acc", "test_acc_std", "wall_s", "eps_min", "eps_avg", "eps_max"]
THREADS_ENV = "UPCYCLED_FL_THREADS"


@dataclass
class DatasetConfig:
    source: str = "synthetic"  # synthetic | file
    path: str = ""
    beta: float = 0.0
    gamma: float = 0.0
    iid: bool = False
    devices: int = 30
    dimx: int = 20
    classes: int = 10
    seed: int | None = None  # None: regenerate with each run seed
    size_kind: str = "lognormal"
    size_n: int = 150
    size_mu_ln: float = math.log(150.0)
    size_sigma_ln: float = 1.0
    size_min: int = 20
    size_max: int = 1000
    test_fraction: float = 0.1
    normalize: bool = False

    def size_spec(self) -> SizeSpec:
        return SizeSpec(self.size_kind, self.size_n, self.size_mu_ln, self.size_sigma_ln, self.size_min, self.size_max)


@dataclass
class StrategyConfig:
    name: str = "fedprox"
    mu: float = 0.0
    server_momentum: float = 0.9
    server_lr: float = 1.0


@dataclass
class UpcycledConfig:
    enabled: bool = False
    comparison: str = "double"
    mode: str = "prox"
    mu: float | None = None
    lambda0: float = 0.0
    lambda_slope: float = 0.0
    c0: float = 0.5


@dataclass
class PrivacyConfig:
    mechanism: str = "none"  # none | output | objective
    tau: float = 1.0
    sigma: float = 1.0
    delta: float = 1e-5
    alpha: float = 10.0
    u1: float = math.sqrt(2.0)
    u2: float = 0.5


@dataclass
class SolverConfig:
    epochs: int = 10
    batch_size: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.5


@dataclass
class RunConfig:
    rounds: int = 80
    participation: float = 0.3
    stragglers: float = 0.0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    out_dir: str = "runs/out"
    diagnostics: bool = False
    check_even_form: bool = False
    checkpoint_every: int = 0
    debug_columns: bool = False


SECTIONS = {
    "dataset": DatasetConfig,
    "strategy": StrategyConfig,
    "upcycled": UpcycledConfig,
    "privacy": PrivacyConfig,
    "solver": SolverConfig,
    "run": RunConfig,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    upcycled: UpcycledConfig = field(default_factory=UpcycledConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        def clean(d):
            return {k: v for k, v in d.items() if v is not None}

        return tomli_w.dumps({name: clean(section) for name, section in self.to_dict().items()})

    def strategy_spec(self) -> StrategySpec:
        s = self.strategy
        return StrategySpec(s.name, s.mu, s.server_momentum, s.server_lr)

    def solver_spec(self) -> SolverSpec:
        s = self.solver
        return SolverSpec(s.epochs, s.batch_size, s.learning_rate, s.momentum)

    def privacy_spec(self) -> PrivacySpec | None:
        p = self.privacy
        if p.mechanism == "output":
            return PrivacySpec("output", output=OutputNoiseSpec(p.tau, p.sigma), delta=p.delta)
        if p.mechanism == "objective":
            return PrivacySpec("objective", objective=ObjectiveNoiseSpec(p.alpha, p.u1, p.u2), delta=p.delta)
        return None

    def run_spec(self, seed: int) -> RunSpec:
        u, r = self.upcycled, self.run
        return RunSpec(
            strategy=self.strategy_spec(),
            solver=self.solver_spec(),
            rounds=r.rounds,
            upcycled=u.enabled,
            comparison=u.comparison,
            schedule=CoefficientSchedule(u.mode, u.mu, u.lambda0, u.lambda_slope, u.c0),
            participation=r.participation,
            stragglers=r.stragglers,
            master_seed=seed,
            privacy=self.privacy_spec(),
            diagnostics=r.diagnostics,
            check_even_form=r.check_even_form,
            checkpoint_every=r.checkpoint_every,
        )

    def build_dataset(self, seed: int):
        d = self.dataset
        data_seed = seed if d.seed is None else d.seed
        if d.source == "file":
            ds = load_dataset(d.path)
        else:
            ds = generate_synthetic(d.beta, d.gamma, d.iid, d.devices, d.dimx, d.classes, d.size_spec(), data_seed)
        if d.test_fraction > 0:
            ds = split_train_test(ds, d.test_fraction, data_seed)
        if d.normalize:
            ds = normalize_features(ds)
        return ds

    def validate(self) -> list[str]:
        problems = []
        d, p, u, r = self.dataset, self.privacy, self.upcycled, self.run
        if d.source not in ("synthetic", "file"):
            problems.append(f"dataset.source must be 'synthetic' or 'file'; got {d.source!r}")
        if d.source == "file" and not d.path:
            problems.append("dataset.path is required when dataset.source = 'file'")
        if d.source == "synthetic":
            if d.devices < 1:
                problems.append("dataset.devices must be >= 1")
            if d.dimx < 1:
                problems.append("dataset.dimx must be >= 1")
            if d.classes < 2:
                problems.append("dataset.classes must be >= 2")
            if d.beta < 0 or d.gamma < 0:
                problems.append("dataset.beta and dataset.gamma must be >= 0")
            problems += ["dataset." + s for s in d.size_spec().validate()]
        if not 0 <= d.test_fraction < 1:
            problems.append("dataset.test_fraction must be in [0, 1)")
        if self.strategy.name not in STRATEGIES:
            problems.append(f"strategy.name must be one of {', '.join(STRATEGIES)}; got {self.strategy.name!r}")
        if u.comparison not in COMPARISON_MODES:
            problems.append(f"upcycled.comparison must be one of {COMPARISON_MODES}; got {u.comparison!r}")
        if u.mode not in COEFFICIENT_MODES:
            problems.append(f"upcycled.mode must be one of {COEFFICIENT_MODES}; got {u.mode!r}")
        if p.mechanism not in ("none", "output", "objective"):
            problems.append(f"privacy.mechanism must be none, output or objective; got {p.mechanism!r}")
        if p.mechanism == "output" and not (p.tau > 0 and p.sigma > 0 and 0 < p.delta < 1):
            problems.append("output perturbation needs tau > 0, sigma > 0 and delta in (0, 1)")
        if p.mechanism == "objective":
            if not (p.alpha > 0 and p.u1 > 0 and p.u2 > 0):
                problems.append("objective perturbation needs alpha, u1, u2 > 0")
            if not self.strategy.mu > 0:
                problems.append("objective perturbation needs strategy.mu > 0")
        if not r.seeds or any(not isinstance(s, int) or s < 0 for s in r.seeds):
            problems.append("run.seeds must be a non-empty list of non-negative integers")
        if len(set(r.seeds)) != len(r.seeds):
            problems.append("run.seeds must be distinct")
        if r.checkpoint_every < 0:
            problems.append("run.checkpoint_every must be >= 0")
        if not problems:
            spec = self.run_spec(r.seeds[0])
            problems += [p for p in spec.validate() if p not in problems]
        return problems


def _coerce(section: str, key: str, value, target_type, problems: list):
    name = f"{section}.{key}"
    types = str(target_type)
    if "bool" in types:
        if isinstance(value, bool):
            return value
        problems.append(f"{name} must be a boolean")
    elif "float" in types:
        if value is None and "None" in types:
            return None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        problems.append(f"{name} must be a number")
    elif "int" in types:
        if value is None and "None" in types:
            return None
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        problems.append(f"{name} must be an integer")
    elif "list" in types:
        if isinstance(value, list):
            return value
        problems.append(f"{name} must be a list")
    else:
        if isinstance(value, str):
            return value
        problems.append(f"{name} must be a string")
    return None


def config_from_dict(raw: dict, strict: bool = True) -> ExperimentConfig:
    """Build and validate a config, reporting every violation at once."""
    problems = []
    sections = {}
    for name, value in raw.items():
        if name not in SECTIONS:
            if strict:
                problems.append(f"unknown section [{name}]; expected one of {', '.join(SECTIONS)}")
            continue
        if not isinstance(value, dict):
            problems.append(f"[{name}] must be a table")
            continue
        cls = SECTIONS[name]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, v in value.items():
            if key not in fields:
                if strict:
                    problems.append(f"unknown key {name}.{key}")
                continue
            coerced = _coerce(name, key, v, fields[key].type, problems)
            if coerced is not None or v is None:
                kwargs[key] = coerced
        sections[name] = cls(**kwargs)
    cfg = ExperimentConfig(**sections)
    problems += cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


# --- running ----------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    rounds_completed: int
    final_loss: float | None
    final_accuracy: float | None
    eps_per_client: dict | None = None
    wall_odd: float = 0.0
    wall_even: float = 0.0
    error: str | None = None

    @property
    def eps_mean(self) -> float | None:
        if not self.eps_per_client:
            return None
        return float(np.mean(list(self.eps_per_client.values())))

    @property
    def completed(self) -> bool:
        return self.error is None


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return mean, std


@dataclass
class SummaryReport:
    config: dict
    seeds: list[SeedResult]

    @property
    def ok(self) -> bool:
        return all(s.completed for s in self.seeds)

    @property
    def accuracy(self):
        return _mean_std([s.final_accuracy for s in self.seeds])

    @property
    def loss(self):
        return _mean_std([s.final_loss for s in self.seeds])

    @property
    def eps(self):
        return _mean_std([s.eps_mean for s in self.seeds])

    def to_json(self) -> dict:
        acc_mean, acc_std = self.accuracy
        loss_mean, loss_std = self.loss
        eps_mean, eps_std = self.eps
        per_seed = []
        for s in self.seeds:
            entry = {
                "seed": s.seed,
                "rounds_completed": s.rounds_completed,
                "final_loss": s.final_loss,
                "final_accuracy": s.final_accuracy,
                "error": s.error,
            }
            if s.eps_per_client is not None:
                eps = list(s.eps_per_client.values())
                entry["eps"] = {
                    "mean": s.eps_mean,
                    "min": min(eps),
                    "max": max(eps),
                    "per_client": {str(k): v for k, v in s.eps_per_client.items()},
                }
            per_seed.append(entry)
        return {
            "accuracy": {"mean": acc_mean, "std": acc_std},
            "loss": {"mean": loss_mean, "std": loss_std},
            "eps_mean": {"mean": eps_mean, "std": eps_std},
            "completed": self.ok,
            "per_seed": per_seed,
            "config": self.config,
            "timing": {
                str(s.seed): {"wall_odd_s": s.wall_odd, "wall_even_s": s.wall_even} for s in self.seeds
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SummaryReport":
        seeds = []
        for entry in obj["per_seed"]:
            timing = obj.get("timing", {}).get(str(entry["seed"]), {})
            eps = entry.get("eps")
            seeds.append(SeedResult(
                entry["seed"], entry["rounds_completed"], entry["final_loss"], entry["final_accuracy"],
                {int(k): v for k, v in eps["per_client"].items()} if eps else None,
                timing.get("wall_odd_s", 0.0), timing.get("wall_even_s", 0.0), entry.get("error"),
            ))
        return cls(obj["config"], seeds)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rounds_csv(path: Path, records, diagnostics: bool = False, debug: bool = False) -> None:
    header = list(CSV_COLUMNS)
    if diagnostics:
        header += ["grad_norm", "step_norm"]
    if debug:
        header += ["selected"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            row = [r.t, r.parity, r.train_loss, r.test_accuracy, r.test_accuracy_std, r.wall_time,
                   r.eps_min, r.eps_avg, r.eps_max]
            if diagnostics:
                row += [r.grad_norm, r.step_norm]
            if debug:
                row += [";".join(map(str, r.selected)) if r.selected else ""]
            w.writerow([_fmt(v) for v in row])


def read_rounds_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def run_seed(config: ExperimentConfig, seed: int, out_dir: Path | None = None):
    """One seeded run. Returns ``(SeedResult, records, simulation)``."""
    records = []
    sim = None
    error = None
    try:
        dataset = config.build_dataset(seed)
        sim = Simulation(dataset, config.run_spec(seed))
        for rec in sim.rounds():
            records.append(rec)
    except UpcycledError as exc:
        if sim is None:
            raise
        error = f"{type(exc).__name__}: {exc}"
    if out_dir is not None:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        write_rounds_csv(seed_dir / "rounds.csv", records, config.run.diagnostics, config.run.debug_columns)
        if sim is not None and sim.checkpoints:
            with (seed_dir / "checkpoints.json").open("w") as fh:
                json.dump({str(k): m.to_json() for k, m in sim.checkpoints.items()}, fh)
    last = records[-1] if records else None
    result = SeedResult(
        seed=seed,
        rounds_completed=len(records),
        final_loss=last.train_loss if last else None,
        final_accuracy=last.test_accuracy if last else None,
        eps_per_client=sim.client_epsilons() if sim is not None else None,
        wall_odd=sum(r.wall_time for r in records if r.parity == "odd"),
        wall_even=sum(r.wall_time for r in records if r.parity == "even"),
        error=error,
    )
    return result, records, sim


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_suite(config: ExperimentConfig, out_dir=None) -> SummaryReport:
    """Run every seed; a diverged seed is reported and the others still run."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        results = list(pool.map(lambda s: run_seed(config, s, out)[0], config.run.seeds))
    report = SummaryReport(config.to_dict(), results)
    if out is not None:
        write_summary(report, out / "summary.json")
    return report


def write_summary(report: SummaryReport, path) -> None:
    with Path(path).open("w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_summary(path) -> SummaryReport:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    with path.open() as fh:
        return SummaryReport.from_json(json.load(fh))


# --- comparison -------------------------------------------------------------

@dataclass
class ComparisonReport:
    seeds: list[int]
    accuracy_delta: list[float]
    loss_delta: list[float]
    eps_delta: list[float | None]
    wall_delta: list[float]

    @property
    def accuracy_wins(self) -> int:
        """Sign-test count: seeds where the upcycled run is more accurate."""
        return sum(d > 0 for d in self.accuracy_delta)

    @property
    def mean_accuracy_delta(self) -> float:
        return float(np.mean(self.accuracy_delta))

    @property
    def mean_loss_delta(self) -> float:
        return float(np.mean(self.loss_delta))

    def to_json(self) -> dict:
        eps = [d for d in self.eps_delta if d is not None]
        return {
            "seeds": self.seeds,
            "accuracy_delta": self.accuracy_delta,
            "loss_delta": self.loss_delta,
            "eps_delta": self.eps_delta,
            "wall_delta": self.wall_delta,
            "mean_accuracy_delta": self.mean_accuracy_delta,
            "mean_loss_delta": self.mean_loss_delta,
            "mean_eps_delta": float(np.mean(eps)) if eps else None,
            "accuracy_wins": self.accuracy_wins,
            "n": len(self.seeds),
        }


def compare(baseline: SummaryReport, upcycled: SummaryReport) -> ComparisonReport:
    """Paired per-seed deltas, upcycled minus baseline."""
    base = {s.seed: s for s in baseline.seeds}
    upc = {s.seed: s for s in upcycled.seeds}
    if set(base) != set(upc):
        raise ContractError(f"seed sets differ: {sorted(base)} vs {sorted(upc)}")
    seeds = sorted(base)
    acc, loss, eps, wall = [], [], [], []
    for s in seeds:
        b, u = base[s], upc[s]
        if b.final_accuracy is None or u.final_accuracy is None:
            raise ContractError(f"seed {s} has no completed rounds in one of the reports")
        acc.append(u.final_accuracy - b.final_accuracy)
        loss.append(u.final_loss - b.final_loss)
        eps.append(u.eps_mean - b.eps_mean if u.eps_mean is not None and b.eps_mean is not None else None)
        wall.append((u.wall_odd + u.wall_even) - (b.wall_odd + b.wall_even))
    return ComparisonReport(seeds, acc, loss, eps, wall)


# --- grid expansion ---------------------------------------------------------

def parse_override_values(text: str) -> list:
    values = []
    for token in text.split(","):
        token = token.strip()
        try:
            values.append(tomli.loads(f"v = {token}")["v"])
        except tomli.TOMLDecodeError:
            values.append(token)
    return values


def expand_grid(base: ExperimentConfig, overrides: dict) -> list[tuple[str, ExperimentConfig]]:
    """Cross product of ``{"section.key": [values...]}`` applied to ``base``."""
    keys = sorted(overrides)
    out = []
    for combo in itertools.product(*(overrides[k] for k in keys)):
        raw = base.to_dict()
        for key, value in zip(keys, combo):
            section, _, name = key.partition(".")
            if section not in raw or not name:
                raise ConfigError(f"bad override key {key!r}; use section.key")
            raw[section][name] = value
        label = "__".join(f"{k}={v}" for k, v in zip(keys, combo)) or "base"
        cfg = config_from_dict({k: {kk: vv for kk, vv in v.items() if vv is not None} for k, v in raw.items()})
        out.append((label, cfg))
    return out


# --- diagnostics over a finished suite --------------------------------------

def analyze_suite(run_dir, probe_count: int = 20) -> dict:
    """Dissimilarity series, C1..C3 and the convergence bound for every seed.

    Needs a suite produced with ``run.diagnostics = true``; the B series also
    needs ``run.checkpoint_every > 0``. ``f*`` is the best training loss seen
    across all seeds ("empirical f*"), so ``f0 - f*`` underestimates the true
    gap and the bound check is conservative.
    """
    from . import analysis, rng as rngmod
    from .models import ModelVector

    run_dir = Path(run_dir)
    with (run_dir / "summary.json").open() as fh:
        summary = json.load(fh)
    cfg = config_from_dict(summary["config"])
    if not cfg.run.diagnostics:
        raise ConfigError("suite was run without run.diagnostics = true; grad/step norms are missing")

    rows_by_seed = {s: read_rounds_csv(run_dir / f"seed_{s}" / "rounds.csv") for s in cfg.run.seeds}
    f_star = min(float(r["train_loss"]) for rows in rows_by_seed.values() for r in rows)
    mu = cfg.upcycled.mu if cfg.upcycled.mu is not None else cfg.strategy.mu
    out = {"empirical_f_star": f_star, "seeds": {}}
    for seed, rows in rows_by_seed.items():
        dataset = cfg.build_dataset(seed)
        init = ModelVector.zeros(dataset.d_x, dataset.C)
        L_hat = analysis.estimate_smoothness(dataset, probe_count, rngmod.stream(seed, rngmod.PROBE))
        b_series = {}
        ckpt_path = run_dir / f"seed_{seed}" / "checkpoints.json"
        if ckpt_path.exists():
            with ckpt_path.open() as fh:
                for k, obj in json.load(fh).items():
                    try:
                        b_series[k] = analysis.estimate_dissimilarity(dataset, ModelVector.from_json(obj))
                    except UpcycledError:
                        b_series[k] = None
        if not b_series:
            b_series["0"] = analysis.estimate_dissimilarity(dataset, init)
        B_hat = max(v for v in b_series.values() if v is not None)
        odd = [r for r in rows if r["parity"] == "odd" and r.get("grad_norm")]
        diags = analysis.TrajectoryDiagnostics(
            np.array([float(r["grad_norm"]) for r in odd]), np.array([float(r["step_norm"]) for r in odd])
        )
        K = max(1, int(math.floor(cfg.run.participation * len(dataset) + 0.5 + 1e-9)))
        entry = {"L_hat": L_hat, "B_hat_series": b_series, "B_hat": B_hat, "K": K, "mu": mu,
                 "h_observed": float(diags.step_norms.max()) if len(odd) else None,
                 "d_observed": float(diags.grad_norms.max()) if len(odd) else None}
        if mu and mu > 0 and len(odd):
            u = cfg.upcycled
            lambdas = [u.lambda0 + u.lambda_slope * m for m in range(len(odd))]
            params = analysis.ConvergenceParams(L_hat, B_hat, mu, mu, K, lambdas[0])
            c1, c2, c3 = analysis.constants(params)
            entry.update(C1=c1, C2=c2, C3=c3)
            f0 = analysis_loss_at(dataset, init)
            try:
                terms = analysis.theorem1_terms(diags, params, f0 - f_star, len(odd), lambdas)
                entry["bound"] = {"initial_gap": terms.initial_gap, "drift_linear": terms.drift_linear,
                                  "drift_quadratic": terms.drift_quadratic, "total": terms.total}
                entry["min_grad_norm_sq"] = diags.min_grad_norm_sq
                entry["bound_holds"] = diags.min_grad_norm_sq <= terms.total
            except analysis.BoundInapplicable as exc:
                entry["bound"] = None
                entry["bound_note"] = str(exc)
        out["seeds"][str(seed)] = entry
    with (run_dir / "diagnostics.json").open("w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    return out


def analysis_loss_at(dataset, w) -> float:
    from .models import xent

    x = np.concatenate([d.train_x for d in dataset])
    y = np.concatenate([d.train_y for d in dataset])
    return xent(w.values, x, y, dataset.C)
