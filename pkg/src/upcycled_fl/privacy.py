"""Output and objective perturbation plus their closed-form accountants.

Output perturbation clips each uploaded local model to norm ``tau`` and adds
``N(0, sigma^2 I)``. Over ``M`` data-touching rounds, with
``q = M tau^2 / (2 sigma^2 |D|^2)``, a client is (eps, delta)-DP for
``eps = 2 sqrt(q log(1/delta)) + q``.

Objective perturbation adds ``<n, w>`` to the local objective, ``n`` drawn with
density proportional to ``exp(-alpha ||n||)``. Each round costs
``(2 alpha u1 mu + 2.8 u2) / (|D| mu)`` and costs add up, with delta = 0.

Extrapolation rounds only post-process already private models, so they never
add privacy cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError
from .models import ModelVector

MECHANISMS = ("output", "objective")


@dataclass(frozen=True)
class OutputNoiseSpec:
    tau: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if not (self.tau > 0 and self.sigma > 0):
            raise ConfigError("output perturbation needs tau > 0 and sigma > 0")


@dataclass(frozen=True)
class ObjectiveNoiseSpec:
    alpha: float = 10.0
    u1: float = math.sqrt(2.0)
    u2: float = 0.5

    def __post_init__(self):
        if not (self.alpha > 0 and self.u1 > 0 and self.u2 > 0):
            raise ConfigError("objective perturbation needs alpha, u1, u2 > 0")


# --- mechanisms -------------------------------------------------------------

def clip(w: ModelVector, tau: float) -> ModelVector:
    """Scale ``w`` onto the ball of radius ``tau`` (identity inside the ball)."""
    norm = w.norm()
    return w.like(w.values / max(1.0, norm / tau))


def gaussian_perturb(w: ModelVector, sigma: float, rng: np.random.Generator) -> ModelVector:
    if not sigma > 0:
        raise ConfigError("sigma must be > 0")
    return w.like(w.values + sigma * rng.standard_normal(w.values.shape[0]))


def sample_exp_norm_noise(dim: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Draw from the density proportional to ``exp(-alpha ||n||_2)`` on R^dim.

    In polar form the norm is Gamma(dim, rate=alpha) and the direction is
    uniform on the sphere.
    """
    if dim < 1 or not alpha > 0:
        raise ConfigError("need dim >= 1 and alpha > 0")
    r = rng.gamma(shape=dim, scale=1.0 / alpha)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return r * direction


def perturbed_local_update(
    mechanism: str | None,
    local_update: Callable[[ModelVector | None], ModelVector],
    spec,
    rng: np.random.Generator,
    shape_tag: tuple[int, int],
    noise_override: np.ndarray | None = None,
) -> ModelVector:
    """Run one client's data-touching update under ``mechanism``.

    ``local_update(linear_noise)`` performs the strategy's local step, with
    ``linear_noise`` injected into its objective (or ``None``).
    """
    if mechanism is None:
        return local_update(None)
    if mechanism == "output":
        return gaussian_perturb(clip(local_update(None), spec.tau), spec.sigma, rng)
    if mechanism == "objective":
        d_x, C = shape_tag
        if noise_override is None:
            noise = sample_exp_norm_noise(C * d_x + C, spec.alpha, rng)
        else:
            noise = noise_override
        return local_update(ModelVector(noise, shape_tag))
    raise ConfigError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


# --- accountants ------------------------------------------------------------

def output_q(M: float, tau: float, sigma: float, n_samples: float) -> float:
    return M * tau**2 / (2.0 * sigma**2 * n_samples**2)


def output_eps_of_delta(M, tau, sigma, n_samples, delta) -> float:
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if min(M, tau, sigma, n_samples) <= 0:
        raise DomainError("M, tau, sigma and n_samples must be positive")
    q = output_q(M, tau, sigma, n_samples)
    return 2.0 * math.sqrt(q * math.log(1.0 / delta)) + q


def output_delta_of_eps(M, tau, sigma, n_samples, eps) -> float:
    if min(M, tau, sigma, n_samples) <= 0:
        raise DomainError("M, tau, sigma and n_samples must be positive")
    q = output_q(M, tau, sigma, n_samples)
    if eps < q:
        raise DomainError(f"eps={eps} is below M tau^2 / (2 sigma^2 |D|^2) = {q}; the bound needs eps >= that")
    # q (eps / 2q - 1/2)^2 rewritten as (eps - q)^2 / 4q: eps - q is exact near eps = q
    return math.exp(-((eps - q) ** 2) / (4.0 * q))


def objective_term(alpha, u1, u2, n_samples, mu) -> float:
    return (2.0 * alpha * u1 * mu + 2.8 * u2) / (n_samples * mu)


def check_objective_feasible(u2: float, n_samples: float, mu: float, client=None) -> None:
    if not mu > 0:
        raise DomainError("objective perturbation needs a proximal mu > 0")
    if u2 > 0.5 * n_samples * mu:
        who = f"client {client}: " if client is not None else ""
        raise DomainError(f"{who}u2={u2} exceeds 0.5 |D| mu = {0.5 * n_samples * mu}; the (eps, 0) bound needs u2 <= 0.5 |D| mu")


def objective_eps(alphas, u1, u2, n_samples, mu) -> float:
    """Total eps over the executed data-touching rounds (one alpha per round)."""
    check_objective_feasible(u2, n_samples, mu)
    if min(u1, u2, n_samples) <= 0 or any(a <= 0 for a in alphas):
        raise DomainError("alpha, u1, u2 and n_samples must be positive")
    return math.fsum(objective_term(a, u1, u2, n_samples, mu) for a in alphas)


# --- ledger -----------------------------------------------------------------

@dataclass
class ClientLedger:
    events: list = field(default_factory=list)  # (parity, params or None)

    @property
    def odd_events(self) -> list[dict]:
        return [p for parity, p in self.events if parity == "odd"]


@dataclass
class PrivacyLedger:
    """Per-client record of data-touching (odd) and free (even) events."""

    mechanism: str | None = None
    delta: float = 1e-5
    clients: dict = field(default_factory=dict)

    def record(self, client: int, parity: str, params: dict | None = None, mechanism: str | None = None) -> None:
        if parity not in ("odd", "even"):
            raise ValueError(f"parity must be 'odd' or 'even', got {parity!r}")
        if parity == "odd":
            if mechanism not in MECHANISMS:
                raise ConfigError(f"unknown mechanism {mechanism!r}")
            if self.mechanism is None:
                self.mechanism = mechanism
            elif mechanism != self.mechanism:
                raise ConfigError(f"cannot mix {self.mechanism} and {mechanism} perturbation in one run")
            params = dict(params or {})
        else:
            params = None
        self.clients.setdefault(client, ClientLedger()).events.append((parity, params))

    def odd_count(self, client: int) -> int:
        entry = self.clients.get(client)
        return len(entry.odd_events) if entry else 0

    def query(self, client: int, delta: float | None = None) -> tuple[float, float]:
        """Cumulative ``(eps, delta)`` for ``client``."""
        delta = self.delta if delta is None else delta
        entry = self.clients.get(client)
        odd = entry.odd_events if entry else []
        if not odd:
            return 0.0, 0.0
        if self.mechanism == "output":
            # rounds with equal parameters pool into M; unequal ones add up in q
            q = math.fsum(output_q(1, e["tau"], e["sigma"], e["n_samples"]) for e in odd)
            if not 0 < delta < 1:
                raise DomainError(f"delta must lie in (0, 1), got {delta}")
            return 2.0 * math.sqrt(q * math.log(1.0 / delta)) + q, delta
        return (
            math.fsum(objective_term(e["alpha"], e["u1"], e["u2"], e["n_samples"], e["mu"]) for e in odd),
            0.0,
        )

    def epsilons(self, client_ids, delta: float | None = None) -> dict:
        return {c: self.query(c, delta)[0] for c in client_ids}

    def without_even(self) -> "PrivacyLedger":
        out = PrivacyLedger(self.mechanism, self.delta)
        for c, entry in self.clients.items():
            out.clients[c] = ClientLedger([e for e in entry.events if e[0] == "odd"])
        return out
