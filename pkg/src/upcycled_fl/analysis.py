"""Heterogeneity and convergence diagnostics for upcycled FedProx.

All quantities are evaluated with full-batch gradients. ``B_hat`` measures
client dissimilarity, ``constants`` evaluates the per-step coefficients of
the descent inequality between consecutive odd rounds, and
``theorem1_bound`` turns a recorded trajectory into the right-hand side of
the min-gradient-norm bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import FederatedDataset
from .errors import DiagnosticError
from .models import ModelVector, xent_grad


class BoundInapplicable(DiagnosticError):
    """Raised when C1 <= 0: the bound says nothing for these parameters."""


def device_gradients(dataset: FederatedDataset, w: ModelVector) -> np.ndarray:
    return np.stack([xent_grad(w.values, d.train_x, d.train_y, dataset.C) for d in dataset])


def global_gradient(dataset: FederatedDataset, w: ModelVector) -> np.ndarray:
    return dataset.weights @ device_gradients(dataset, w)


def estimate_dissimilarity(dataset: FederatedDataset, w: ModelVector, tol: float = 1e-8) -> float:
    """``sqrt(sum_i p_i ||grad F_i||^2 / ||sum_i p_i grad F_i||^2)``."""
    g = device_gradients(dataset, w)
    p = dataset.weights
    mean_sq = float(p @ np.einsum("ij,ij->i", g, g))
    global_g = p @ g
    denom = float(global_g @ global_g)
    if math.sqrt(denom) <= tol:
        raise DiagnosticError(
            f"global gradient norm {math.sqrt(denom):.3g} is below {tol}; evaluate B at a model away from the optimum"
        )
    return math.sqrt(mean_sq / denom)


def smoothness_from_gradient(grad_fn: Callable[[np.ndarray], np.ndarray], dim: int, probe_count: int,
                             rng: np.random.Generator, scale: float = 1.0, radius: float = 1e-2) -> float:
    """Largest observed ``||g(a) - g(b)|| / ||a - b||`` over random nearby pairs.

    This is a lower estimate of the true Lipschitz constant. Probes are drawn
    one after another, so a longer run extends a shorter one's probe set.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    best = 0.0
    for _ in range(probe_count):
        a = scale * rng.standard_normal(dim)
        step = rng.standard_normal(dim)
        b = a + radius * step / np.linalg.norm(step)
        best = max(best, float(np.linalg.norm(grad_fn(a) - grad_fn(b)) / np.linalg.norm(a - b)))
    return best


def estimate_smoothness(dataset: FederatedDataset, probe_count: int, rng: np.random.Generator,
                        scale: float = 0.1, radius: float = 1e-2) -> float:
    # probes near the origin, where softmax curvature peaks
    d_x, C = dataset.d_x, dataset.C
    x = np.concatenate([d.train_x for d in dataset])
    y = np.concatenate([d.train_y for d in dataset])
    return smoothness_from_gradient(lambda v: xent_grad(v, x, y, C), C * d_x + C, probe_count, rng, scale, radius)


@dataclass(frozen=True)
class ConvergenceParams:
    L: float
    B: float
    mu: float
    rho: float
    K: int
    lambda_m: float = 0.0
    h: float | None = None  # observed bound on ||g^{2m-1} - g^{2m-2}||, informational
    d: float | None = None  # observed bound on ||grad f||, informational

    def __post_init__(self):
        if not (self.L > 0 and self.mu > 0 and self.rho > 0 and self.K >= 1 and self.B >= 0 and self.lambda_m >= 0):
            raise ValueError("need L, mu, rho > 0, K >= 1, B >= 0 and lambda_m >= 0")


def constants(p: ConvergenceParams) -> tuple[float, float, float]:
    """``(C1, C2, C3)``. C1 does not depend on ``lambda_m``; C2 and C3 carry
    ``mu / (mu + lambda_m)`` and its square."""
    L, B, mu, rho, K = p.L, p.B, p.mu, p.rho, p.K
    s = math.sqrt(2.0 / K)
    factor = mu / (mu + p.lambda_m)
    c1 = (
        1.0 / mu
        - L * B / (mu**2 * rho)
        - L * B**2 / (2.0 * rho**2)
        - 2.0 * B**2 / (K * rho**2)
        - (2.0 * L * B + rho) / rho * s * B / rho
    )
    c2 = (
        L**2 / (mu**2 * rho)
        + (L + mu) / mu**2
        + L * (L + rho) * B / rho**2
        + 4.0 * L * B / (K * rho**2)
        + (4.0 * L**2 * B + rho * L * (1.0 + 2.0 * B)) / rho**2 * s
    ) * factor
    c3 = (
        L * (L + rho) ** 2 / (2.0 * rho**2)
        + 2.0 * L**2 / (K * rho**2)
        + 2.0 * L * (L + rho) / rho * s * L / rho
    ) * factor**2
    return c1, c2, c3


@dataclass(frozen=True)
class TrajectoryDiagnostics:
    grad_norms: np.ndarray  # ||grad f(g^{2m-1})|| per odd round
    step_norms: np.ndarray  # ||g^{2m-1} - g^{2m-2}|| per odd round

    def __post_init__(self):
        g = np.asarray(self.grad_norms, dtype=float)
        s = np.asarray(self.step_norms, dtype=float)
        if g.shape != s.shape or np.any(g < 0) or np.any(s < 0):
            raise ValueError("grad and step norms must be non-negative and of equal length")
        object.__setattr__(self, "grad_norms", g)
        object.__setattr__(self, "step_norms", s)

    @property
    def h1(self) -> np.ndarray:
        return self.grad_norms * self.step_norms

    @property
    def h2(self) -> np.ndarray:
        return self.step_norms**2

    @property
    def min_grad_norm_sq(self) -> float:
        return float(np.min(self.grad_norms**2))

    @classmethod
    def from_records(cls, records) -> "TrajectoryDiagnostics":
        rows = [r for r in records if r.parity == "odd" and r.grad_norm is not None]
        return cls(np.array([r.grad_norm for r in rows]), np.array([r.step_norm for r in rows]))


@dataclass(frozen=True)
class BoundTerms:
    initial_gap: float
    drift_linear: float
    drift_quadratic: float
    C1: float

    @property
    def total(self) -> float:
        return self.initial_gap + self.drift_linear + self.drift_quadratic


def theorem1_terms(diags: TrajectoryDiagnostics, params: ConvergenceParams, f0_minus_fstar: float, M: int,
                   lambdas: Sequence[float] | None = None) -> BoundTerms:
    """Three-term bound on ``min_m ||grad f(g^{2m-1})||^2``.

    ``lambdas`` gives a per-round ``lambda_m``; otherwise ``params.lambda_m``
    is used for every round.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    c1, _, _ = constants(params)
    if c1 <= 0:
        raise BoundInapplicable(f"C1 = {c1:.4g} <= 0, so the convergence bound does not apply")
    n = len(diags.h1)
    lambdas = [params.lambda_m] * n if lambdas is None else list(lambdas)
    if len(lambdas) != n:
        raise ValueError("one lambda per recorded odd round is required")
    c2s, c3s = [], []
    for lam in lambdas:
        _, c2, c3 = constants(ConvergenceParams(params.L, params.B, params.mu, params.rho, params.K, lam))
        c2s.append(c2)
        c3s.append(c3)
    scale = M * c1
    return BoundTerms(
        f0_minus_fstar / scale,
        float(np.dot(c2s, diags.h1)) / scale,
        float(np.dot(c3s, diags.h2)) / scale,
        c1,
    )


def theorem1_bound(diags: TrajectoryDiagnostics, params: ConvergenceParams, f0_minus_fstar: float, M: int,
                   lambdas: Sequence[float] | None = None) -> float:
    return theorem1_terms(diags, params, f0_minus_fstar, M, lambdas).total
