"""Federated round loop, baseline strategies and the upcycled wrapper.

Baseline strategies: FedAvg, FedAvgM (server momentum), FedProx (proximal
local objective) and Scaffold (control variates, option II). The upcycled
wrapper alternates a normal baseline round (odd) with a data-free server
extrapolation ``g + c_m (g - g_prev)`` (even).

Every random event is keyed by ``(master_seed, purpose, plan_index, device)``.
``plan_index`` is the baseline round number, or the odd-round number ``m`` in
double-iteration mode, so an upcycled run and its baseline see exactly the same
client samples, stragglers, batch orders and noise.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import rng as rngmod
from .data import FederatedDataset
from .errors import ConfigError, ContractError
from .models import LocalObjective, ModelVector, SolverSpec, sgd_steps, solve_sgd, xent, xent_grad
from .privacy import (
    ObjectiveNoiseSpec,
    OutputNoiseSpec,
    PrivacyLedger,
    check_objective_feasible,
    perturbed_local_update,
)

STRATEGIES = ("fedavg", "fedavgm", "fedprox", "scaffold")
COEFFICIENT_MODES = ("prox", "alg1", "corollary", "fixed")
COMPARISON_MODES = ("double", "fused")


@dataclass(frozen=True)
class StrategySpec:
    name: str = "fedprox"
    mu: float = 0.0
    server_momentum: float = 0.9  # FedAvgM only
    server_lr: float = 1.0  # FedAvgM and Scaffold

    def validate(self) -> list[str]:
        problems = []
        if self.name not in STRATEGIES:
            problems.append(f"strategy must be one of {', '.join(STRATEGIES)}; got {self.name!r}")
        if self.mu < 0:
            problems.append("strategy.mu must be >= 0")
        if not 0 <= self.server_momentum < 1:
            problems.append("strategy.server_momentum must be in [0, 1)")
        if not self.server_lr > 0:
            problems.append("strategy.server_lr must be > 0")
        return problems

    @property
    def prox_mu(self) -> float:
        return self.mu if self.name == "fedprox" else 0.0


@dataclass(frozen=True)
class CoefficientSchedule:
    """How the even-round extrapolation coefficient ``c_m`` is chosen.

    ``lambda_m = lambda0 + lambda_slope * (m - 1)``.
    """

    mode: str = "prox"
    mu: float | None = None
    lambda0: float = 0.0
    lambda_slope: float = 0.0
    c0: float = 0.5

    def validate(self, fallback_mu: float = 0.0) -> list[str]:
        problems = []
        if self.mode not in COEFFICIENT_MODES:
            problems.append(f"coefficient mode must be one of {', '.join(COEFFICIENT_MODES)}; got {self.mode!r}")
        if self.lambda0 < 0 or self.lambda_slope < 0:
            problems.append("lambda0 and lambda_slope must be >= 0")
        if self.c0 < 0:
            problems.append("c0 must be >= 0")
        if self.mode == "prox" and not (self.mu if self.mu is not None else fallback_mu) > 0:
            problems.append("coefficient mode 'prox' needs mu > 0 (set upcycled.mu for non-proximal strategies)")
        return problems

    def coefficient(self, m: int, M: int, fallback_mu: float = 0.0) -> float:
        mu = self.mu if self.mu is not None else fallback_mu
        lam = self.lambda0 + self.lambda_slope * (m - 1)
        return coefficient_schedule(self.mode, mu, lam, m, M, c0=self.c0)


def coefficient_schedule(mode: str, mu: float, lambda_m: float, m: int, M: int, c0: float = 0.5) -> float:
    """Even-round coefficient ``c_m``.

    ``prox``: ``mu / (mu + lambda_m)``, from the first-order condition of the
    proximal local problem. ``alg1``: ``lambda_m / 2``. ``corollary``:
    ``c0 / sqrt(M)``. ``fixed``: ``c0``.
    """
    if mode == "prox":
        if not mu > 0:
            raise ConfigError("mode 'prox' needs mu > 0")
        return mu / (mu + lambda_m)
    if mode == "alg1":
        return lambda_m / 2.0
    if mode == "corollary":
        return c0 / math.sqrt(M)
    if mode == "fixed":
        return c0
    raise ConfigError(f"unknown coefficient mode {mode!r}; expected one of {COEFFICIENT_MODES}")


@dataclass
class StrategyState:
    global_model: ModelVector
    previous_global: ModelVector | None = None
    momentum: np.ndarray | None = None  # FedAvgM buffer
    server_control: np.ndarray | None = None  # Scaffold c
    client_controls: dict = field(default_factory=dict)  # Scaffold c_i


@dataclass(frozen=True)
class RoundPlan:
    t: int
    parity: str
    selected: tuple[int, ...]
    epochs: dict

    def __post_init__(self):
        if self.parity == "even" and self.selected:
            raise ContractError("even rounds select no clients")


@dataclass
class RoundRecord:
    t: int
    parity: str
    train_loss: float
    test_accuracy: float
    test_accuracy_std: float
    wall_time: float
    eps_min: float | None = None
    eps_avg: float | None = None
    eps_max: float | None = None
    plan_index: int | None = None
    selected: tuple[int, ...] | None = None
    grad_norm: float | None = None
    step_norm: float | None = None
    even_form_gap: float | None = None
    coefficient: float | None = None


# --- planning ---------------------------------------------------------------

def _gen(seed_or_gen, purpose: str) -> np.random.Generator:
    if isinstance(seed_or_gen, np.random.Generator):
        return seed_or_gen
    return rngmod.stream(int(seed_or_gen), purpose)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def sample_clients(num_devices: int, participation_fraction: float, round_seed) -> tuple[int, ...]:
    """Uniform subset of ``round(fraction * num_devices)`` (at least one) positions."""
    if not 0 < participation_fraction <= 1:
        raise ConfigError("participation fraction must be in (0, 1]")
    k = max(1, _round_half_up(participation_fraction * num_devices))
    if k >= num_devices:
        return tuple(range(num_devices))
    picked = _gen(round_seed, rngmod.SAMPLE).choice(num_devices, size=k, replace=False)
    return tuple(sorted(int(i) for i in picked))


def assign_stragglers(selected, straggler_fraction: float, E: int, round_seed) -> dict:
    """``round(fraction * |selected|)`` stragglers get ``U{1..E-1}`` epochs, the rest ``E``."""
    if not 0 <= straggler_fraction <= 1:
        raise ConfigError("straggler fraction must be in [0, 1]")
    selected = sorted(selected)
    n_slow = _round_half_up(straggler_fraction * len(selected))
    epochs = {i: E for i in selected}
    if n_slow == 0:
        return epochs
    g = _gen(round_seed, rngmod.STRAGGLE)
    slow = g.permutation(len(selected))[:n_slow]
    for j in sorted(slow):
        epochs[selected[j]] = int(g.integers(1, E)) if E > 1 else 1
    return epochs


# --- per-round operations ---------------------------------------------------

@dataclass
class LocalResult:
    model: ModelVector
    control_delta: np.ndarray | None = None
    steps: int = 0


def local_update(
    strategy: StrategySpec,
    shard,
    C: int,
    state: StrategyState,
    epochs: int,
    rng: np.random.Generator,
    solver: SolverSpec,
    linear_noise: ModelVector | None = None,
    device: int | None = None,
    context: str = "",
) -> LocalResult:
    """One client's local training from the current global model."""
    start = state.global_model
    prox_mu = strategy.prox_mu
    objective = LocalObjective.for_shard(
        shard, C, prox_mu=prox_mu, prox_anchor=start if prox_mu > 0 else None, linear_noise=linear_noise
    )
    if strategy.name != "scaffold":
        model = solve_sgd(objective, start, solver, rng, epochs=epochs, context=context)
        return LocalResult(model, steps=sgd_steps(shard.n_train, solver.batch_size, epochs))

    dim = start.values.shape[0]
    c = state.server_control if state.server_control is not None else np.zeros(dim)
    c_i = state.client_controls.get(device, np.zeros(dim))
    model = solve_sgd(objective, start, solver, rng, epochs=epochs, drift_correction=c - c_i, context=context)
    steps = sgd_steps(shard.n_train, solver.batch_size, epochs)
    if solver.learning_rate > 0:
        c_new = c_i - c + (start.values - model.values) / (steps * solver.learning_rate)
    else:
        c_new = c_i
    return LocalResult(model, c_new - c_i, steps)


def aggregate(locals_: dict, weights: dict) -> ModelVector:
    """Weighted average, weights renormalised over the keys of ``locals_``.

    Summation runs in sorted key order so the result is schedule independent.
    """
    if not locals_:
        raise ContractError("nothing to aggregate")
    keys = sorted(locals_)
    first = locals_[keys[0]]
    w = np.array([float(weights[k]) for k in keys])
    if np.any(w <= 0):
        raise ContractError("aggregation weights must be positive")
    w /= w.sum()
    acc = np.zeros_like(first.values)
    for k, wk in zip(keys, w):
        m = locals_[k]
        if m.shape_tag != first.shape_tag:
            raise ContractError(f"shape mismatch in aggregation: {m.shape_tag} vs {first.shape_tag}")
        acc += wk * m.values
    return first.like(acc)


def upcycled_even_update(current: ModelVector, previous: ModelVector, c: float) -> ModelVector:
    """Server-side extrapolation ``current + c (current - previous)``."""
    if current.shape_tag != previous.shape_tag:
        raise ContractError(f"shape mismatch: {current.shape_tag} vs {previous.shape_tag}")
    if c < 0:
        raise ContractError("extrapolation coefficient must be >= 0")
    return current.like(current.values + c * (current.values - previous.values))


def server_step(strategy: StrategySpec, state: StrategyState, aggregated: ModelVector,
                control_deltas: dict | None = None, num_devices: int = 1) -> ModelVector:
    """Strategy-specific post-aggregation step; mutates the aux state in ``state``."""
    g = state.global_model
    if strategy.name == "fedavgm":
        pseudo_grad = g.values - aggregated.values
        if state.momentum is None:
            state.momentum = np.zeros_like(pseudo_grad)
        state.momentum = strategy.server_momentum * state.momentum + pseudo_grad
        return g.like(g.values - strategy.server_lr * state.momentum)
    if strategy.name == "scaffold":
        if control_deltas:
            if state.server_control is None:
                state.server_control = np.zeros_like(g.values)
            total = np.zeros_like(g.values)
            for k in sorted(control_deltas):
                total += control_deltas[k]
            state.server_control = state.server_control + total / num_devices
        return g.like(g.values + strategy.server_lr * (aggregated.values - g.values))
    return aggregated


# --- evaluation -------------------------------------------------------------

class Evaluator:
    """Global metrics from a one-time snapshot of every shard.

    Training loss is ``f = sum_i p_i F_i``, which with ``p_i`` proportional to
    shard size equals the pooled mean cross-entropy. Test accuracy is the
    ``p_i``-weighted mean of per-device accuracies over devices with test data
    (falling back to training data when no device has any).
    """

    def __init__(self, dataset: FederatedDataset):
        self.C = dataset.C
        self.x = np.concatenate([d.train_x for d in dataset])
        self.y = np.concatenate([d.train_y for d in dataset])
        weights = dataset.weights
        tests = [(d.test_x, d.test_y, w) for d, w in zip(dataset, weights) if d.n_test]
        if not tests:
            tests = [(d.train_x, d.train_y, w) for d, w in zip(dataset, weights)]
        self.tests = tests

    def train_loss(self, w: ModelVector) -> float:
        return xent(w.values, self.x, self.y, self.C)

    def grad_norm(self, w: ModelVector) -> float:
        return float(np.linalg.norm(xent_grad(w.values, self.x, self.y, self.C)))

    def test_accuracy(self, w: ModelVector) -> tuple[float, float]:
        W = w.values[: self.C * w.d_x].reshape(self.C, w.d_x)
        b = w.values[self.C * w.d_x :]
        accs = np.array([np.mean(np.argmax(x @ W.T + b, axis=1) == y) for x, y, _ in self.tests])
        p = np.array([t[2] for t in self.tests])
        return float(accs @ (p / p.sum())), float(accs.std())


# --- the run loop -----------------------------------------------------------

@dataclass(frozen=True)
class PrivacySpec:
    mechanism: str  # "output" | "objective"
    output: OutputNoiseSpec | None = None
    objective: ObjectiveNoiseSpec | None = None
    delta: float = 1e-5

    @property
    def params(self):
        return self.output if self.mechanism == "output" else self.objective


@dataclass(frozen=True)
class RunSpec:
    strategy: StrategySpec = StrategySpec()
    solver: SolverSpec = SolverSpec()
    rounds: int = 80
    upcycled: bool = False
    comparison: str = "double"
    schedule: CoefficientSchedule = CoefficientSchedule()
    participation: float = 0.3
    stragglers: float = 0.0
    master_seed: int = 0
    privacy: PrivacySpec | None = None
    diagnostics: bool = False
    check_even_form: bool = False
    checkpoint_every: int = 0  # odd rounds between global-model checkpoints; 0 disables

    def validate(self) -> list[str]:
        problems = self.strategy.validate() + self.solver.validate()
        if self.rounds < 1:
            problems.append("rounds must be >= 1")
        if self.upcycled:
            if self.comparison not in COMPARISON_MODES:
                problems.append(f"comparison must be one of {COMPARISON_MODES}; got {self.comparison!r}")
            elif self.comparison == "double" and self.rounds % 2:
                problems.append(f"double-iteration upcycled runs need an even number of rounds; got {self.rounds}")
            problems += self.schedule.validate(self.strategy.mu)
        if not 0 < self.participation <= 1:
            problems.append("participation must be in (0, 1]")
        if not 0 <= self.stragglers <= 1:
            problems.append("stragglers must be in [0, 1]")
        if self.master_seed < 0:
            problems.append("seed must be >= 0")
        return problems


class Simulation:
    """Coordinator for one seeded run; iterate :meth:`rounds` for records."""

    def __init__(self, dataset: FederatedDataset, spec: RunSpec, init: ModelVector | None = None):
        problems = spec.validate()
        if problems:
            raise ConfigError(problems)
        self.dataset = dataset
        self.spec = spec
        self.n = len(dataset)
        self.device_ids = [d.device_id for d in dataset]
        self.sizes = {i: d.n_train for i, d in enumerate(dataset)}
        self.weights = dict(enumerate(dataset.weights))
        init = init if init is not None else ModelVector.zeros(dataset.d_x, dataset.C)
        if init.shape_tag != (dataset.d_x, dataset.C):
            raise ContractError("initial model does not match the dataset shape")
        self.state = StrategyState(init)
        self.evaluator = Evaluator(dataset)
        self.ledger = PrivacyLedger(delta=spec.privacy.delta) if spec.privacy else None
        self.last_locals: dict = {}
        self.checkpoints: dict = {0: init} if spec.checkpoint_every else {}
        if spec.privacy and spec.privacy.mechanism == "objective":
            for i, n in self.sizes.items():
                check_objective_feasible(spec.privacy.objective.u2, n, spec.strategy.mu, client=self.device_ids[i])

    @property
    def global_model(self) -> ModelVector:
        return self.state.global_model

    def plan(self, t: int) -> tuple[RoundPlan, int]:
        spec = self.spec
        if spec.upcycled and spec.comparison == "double":
            k = (t + 1) // 2
            if t % 2 == 0:
                return RoundPlan(t, "even", (), {}), k
        else:
            k = t
        selected = sample_clients(self.n, spec.participation, rngmod.stream(spec.master_seed, rngmod.SAMPLE, k))
        epochs = assign_stragglers(selected, spec.stragglers, spec.solver.epochs,
                                   rngmod.stream(spec.master_seed, rngmod.STRAGGLE, k))
        return RoundPlan(t, "odd", selected, epochs), k

    def _train_round(self, plan: RoundPlan, k: int) -> ModelVector:
        spec = self.spec
        privacy = spec.privacy
        locals_, deltas = {}, {}
        for i in plan.selected:
            shard = self.dataset.devices[i]
            dev = self.device_ids[i]
            train_rng = rngmod.stream(spec.master_seed, rngmod.LOCAL, k, i)
            context = f"round {plan.t}, device {dev}"
            result = {}

            def update(noise, i=i, shard=shard, train_rng=train_rng, context=context):
                r = local_update(spec.strategy, shard, self.dataset.C, self.state, plan.epochs[i],
                                 train_rng, spec.solver, linear_noise=noise, device=i, context=context)
                result["r"] = r
                return r.model

            if privacy is None:
                locals_[i] = update(None)
            else:
                noise_rng = rngmod.stream(spec.master_seed, rngmod.NOISE, k, i)
                locals_[i] = perturbed_local_update(privacy.mechanism, update, privacy.params, noise_rng,
                                                    self.state.global_model.shape_tag)
                params = {"n_samples": self.sizes[i]}
                if privacy.mechanism == "output":
                    params.update(tau=privacy.output.tau, sigma=privacy.output.sigma)
                else:
                    o = privacy.objective
                    params.update(alpha=o.alpha, u1=o.u1, u2=o.u2, mu=spec.strategy.mu)
                self.ledger.record(dev, "odd", params, mechanism=privacy.mechanism)
            if result["r"].control_delta is not None:
                deltas[i] = result["r"].control_delta
        self.last_locals = locals_
        aggregated = aggregate(locals_, self.weights)
        new_global = server_step(spec.strategy, self.state, aggregated, deltas, self.n)
        if spec.strategy.name == "scaffold":
            for i, d in deltas.items():
                self.state.client_controls[i] = self.state.client_controls.get(i, 0.0) + d
        return new_global

    def _even_form_gap(self, current: ModelVector, previous: ModelVector, c: float, server: ModelVector):
        """Per-client extrapolation then aggregation, compared to the server form."""
        if self.spec.strategy.name == "fedavgm" or not self.last_locals:
            return None
        if self.spec.strategy.name == "scaffold" and self.spec.strategy.server_lr != 1.0:
            return None
        step = c * (current.values - previous.values)
        per_client = {i: m.like(m.values + step) for i, m in self.last_locals.items()}
        return float(np.max(np.abs(aggregate(per_client, self.weights).values - server.values)))

    def rounds(self) -> Iterator[RoundRecord]:
        spec = self.spec
        M = spec.rounds // 2 if spec.comparison == "double" else spec.rounds
        for t in range(1, spec.rounds + 1):
            tic = time.perf_counter()
            plan, k = self.plan(t)
            before = self.state.global_model
            gap, coef = None, None
            if plan.parity == "even":
                coef = spec.schedule.coefficient(k, M, spec.strategy.mu)
                new = upcycled_even_update(before, self.state.previous_global, coef)
                if self.ledger is not None:
                    for dev in self.device_ids:
                        self.ledger.record(dev, "even")
            else:
                new = self._train_round(plan, k)
                if spec.upcycled and spec.comparison == "fused":
                    coef = spec.schedule.coefficient(k, M, spec.strategy.mu)
                    new = upcycled_even_update(new, before, coef)
            wall = time.perf_counter() - tic
            if plan.parity == "even" and spec.check_even_form:
                gap = self._even_form_gap(before, self.state.previous_global, coef, new)
            self.state.previous_global = before
            self.state.global_model = new

            rec = self._record(plan, k, new, before, wall)
            rec.even_form_gap, rec.coefficient = gap, coef
            if spec.checkpoint_every and plan.parity == "odd" and k % spec.checkpoint_every == 0:
                self.checkpoints[k] = new
            yield rec

    def _record(self, plan: RoundPlan, k: int, new: ModelVector, before: ModelVector, wall: float) -> RoundRecord:
        acc, acc_std = self.evaluator.test_accuracy(new)
        rec = RoundRecord(
            t=plan.t,
            parity=plan.parity,
            train_loss=self.evaluator.train_loss(new),
            test_accuracy=acc,
            test_accuracy_std=acc_std,
            wall_time=wall,
            plan_index=k,
            selected=tuple(self.device_ids[i] for i in plan.selected) if plan.parity == "odd" else None,
        )
        if self.ledger is not None:
            eps = list(self.ledger.epsilons(self.device_ids).values())
            rec.eps_min, rec.eps_avg, rec.eps_max = min(eps), float(np.mean(eps)), max(eps)
        if self.spec.diagnostics and plan.parity == "odd":
            rec.grad_norm = self.evaluator.grad_norm(new)
            rec.step_norm = (new - before).norm()
        return rec

    def client_epsilons(self) -> dict | None:
        if self.ledger is None:
            return None
        return self.ledger.epsilons(self.device_ids)


def run(dataset: FederatedDataset, spec: RunSpec, init: ModelVector | None = None) -> Iterator[RoundRecord]:
    yield from Simulation(dataset, spec, init).rounds()
