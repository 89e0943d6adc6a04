"""Multiclass softmax regression: loss, analytic gradient, local SGD solver.

Parameters are flattened as ``W`` (``C x d_x``, row-major) followed by ``b``
(``C``). All heavy lifting happens on raw numpy arrays; :class:`ModelVector`
only exists at module boundaries to keep shapes honest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, EvaluationError


@dataclass(frozen=True, eq=False)
class ModelVector:
    values: np.ndarray
    shape_tag: tuple[int, int]  # (d_x, C)

    def __post_init__(self):
        d_x, C = self.shape_tag
        values = np.asarray(self.values, dtype=float)
        if values.shape != (C * d_x + C,):
            raise ContractError(f"model of length {values.shape} does not fit shape {self.shape_tag}")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shape_tag", (int(d_x), int(C)))

    @classmethod
    def zeros(cls, d_x: int, C: int) -> "ModelVector":
        return cls(np.zeros(C * d_x + C), (d_x, C))

    @property
    def d_x(self) -> int:
        return self.shape_tag[0]

    @property
    def C(self) -> int:
        return self.shape_tag[1]

    @property
    def W(self) -> np.ndarray:
        return self.values[: self.C * self.d_x].reshape(self.C, self.d_x)

    @property
    def b(self) -> np.ndarray:
        return self.values[self.C * self.d_x :]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def like(self, values: np.ndarray) -> "ModelVector":
        return ModelVector(values, self.shape_tag)

    def _check(self, other: "ModelVector"):
        if not isinstance(other, ModelVector):
            return NotImplemented
        if other.shape_tag != self.shape_tag:
            raise ContractError(f"shape mismatch: {self.shape_tag} vs {other.shape_tag}")
        return None

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return self.like(self.values + other.values)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return self.like(self.values - other.values)

    def __mul__(self, scalar):
        if isinstance(scalar, ModelVector):
            return NotImplemented
        return self.like(self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return self.like(-self.values)

    def equals(self, other: "ModelVector") -> bool:
        return self.shape_tag == other.shape_tag and np.array_equal(self.values, other.values)

    def to_json(self) -> dict:
        return {"d_x": self.d_x, "C": self.C, "values": self.values.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelVector":
        return cls(np.array(obj["values"], dtype=float), (int(obj["d_x"]), int(obj["C"])))


@dataclass(frozen=True)
class SolverSpec:
    epochs: int = 10
    batch_size: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.5

    def validate(self) -> list[str]:
        problems = []
        if self.epochs < 1:
            problems.append("solver.epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("solver.batch_size must be >= 1")
        if not self.learning_rate >= 0:
            problems.append("solver.learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            problems.append("solver.momentum must be in [0, 1)")
        return problems


@dataclass(frozen=True, eq=False)
class LocalObjective:
    """``F_i(w) + (prox_mu / 2) ||w - prox_anchor||^2 + <linear_noise, w>``."""

    x: np.ndarray
    y: np.ndarray
    C: int
    prox_mu: float = 0.0
    prox_anchor: ModelVector | None = None
    linear_noise: ModelVector | None = None

    def __post_init__(self):
        if self.prox_mu < 0:
            raise ContractError("prox_mu must be >= 0")
        if (self.prox_mu > 0) != (self.prox_anchor is not None):
            raise ContractError("prox_anchor must be given exactly when prox_mu > 0")
        if len(self.y) == 0:
            raise ContractError("objective needs at least one sample")

    @classmethod
    def for_shard(cls, shard, C: int, **kwargs) -> "LocalObjective":
        return cls(shard.train_x, shard.train_y, C, **kwargs)

    @property
    def shape_tag(self) -> tuple[int, int]:
        return (int(self.x.shape[1]), int(self.C))

    def check(self, w: ModelVector) -> None:
        if w.shape_tag != self.shape_tag:
            raise ContractError(f"model shape {w.shape_tag} does not match data shape {self.shape_tag}")


def _split(values: np.ndarray, d_x: int, C: int) -> tuple[np.ndarray, np.ndarray]:
    return values[: C * d_x].reshape(C, d_x), values[C * d_x :]


def logits(values: np.ndarray, x: np.ndarray, C: int) -> np.ndarray:
    W, b = _split(values, x.shape[1], C)
    return x @ W.T + b


def xent(values: np.ndarray, x: np.ndarray, y: np.ndarray, C: int) -> float:
    """Mean cross-entropy of softmax(logits)."""
    z = logits(values, x, C)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def xent_grad(values: np.ndarray, x: np.ndarray, y: np.ndarray, C: int) -> np.ndarray:
    """Gradient of :func:`xent` in the flat layout."""
    z = logits(values, x, C)
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    p /= len(y)
    return np.concatenate([(p.T @ x).ravel(), p.sum(axis=0)])


def _extra_grad(objective: LocalObjective, values: np.ndarray) -> np.ndarray | float:
    g = 0.0
    if objective.prox_mu > 0:
        g = objective.prox_mu * (values - objective.prox_anchor.values)
    if objective.linear_noise is not None:
        g = g + objective.linear_noise.values
    return g


def loss(objective: LocalObjective, w: ModelVector) -> float:
    objective.check(w)
    v = w.values
    out = xent(v, objective.x, objective.y, objective.C)
    if objective.prox_mu > 0:
        diff = v - objective.prox_anchor.values
        out += 0.5 * objective.prox_mu * float(diff @ diff)
    if objective.linear_noise is not None:
        out += float(objective.linear_noise.values @ v)
    return out


def gradient(objective: LocalObjective, w: ModelVector) -> ModelVector:
    objective.check(w)
    g = xent_grad(w.values, objective.x, objective.y, objective.C) + _extra_grad(objective, w.values)
    return w.like(g)


def sgd_steps(n: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n / batch_size)


def solve_sgd(
    objective: LocalObjective,
    init: ModelVector,
    spec: SolverSpec,
    rng: np.random.Generator,
    epochs: int | None = None,
    drift_correction: np.ndarray | None = None,
    context: str = "",
) -> ModelVector:
    """Mini-batch SGD with heavy-ball momentum (``v <- m v - lr g; w <- w + v``).

    ``epochs`` overrides ``spec.epochs`` (stragglers). ``drift_correction`` is a
    constant added to every stochastic gradient (Scaffold's ``c - c_i``). Batch
    order is a fresh permutation from ``rng`` each epoch.
    """
    objective.check(init)
    epochs = spec.epochs if epochs is None else epochs
    if epochs < 1:
        raise ContractError("epochs must be >= 1")
    x, y, C = objective.x, objective.y, objective.C
    n, bs = len(y), spec.batch_size
    w = init.values.copy()
    vel = np.zeros_like(w)
    lr, mom = spec.learning_rate, spec.momentum
    const = 0.0
    if objective.linear_noise is not None:
        const = objective.linear_noise.values
    if drift_correction is not None:
        const = const + drift_correction
    anchor = objective.prox_anchor.values if objective.prox_mu > 0 else None

    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            g = xent_grad(w, x[idx], y[idx], C) + const
            if anchor is not None:
                g += objective.prox_mu * (w - anchor)
            vel *= mom
            vel -= lr * g
            w += vel
        if not np.all(np.isfinite(w)) or not math.isfinite(xent(w, x, y, C)):
            where = f" ({context})" if context else ""
            raise DivergenceError(f"local SGD diverged at epoch {epoch + 1}{where}")
    return init.like(w)


def predict(w: ModelVector, x: np.ndarray) -> np.ndarray:
    # np.argmax breaks ties toward the lowest class index
    return np.argmax(logits(w.values, x, w.C), axis=1)


def evaluate(w: ModelVector, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """``(mean cross-entropy, accuracy)`` of ``w`` on one split."""
    if len(y) == 0:
        raise EvaluationError("cannot evaluate on an empty split")
    if x.shape[1] != w.d_x:
        raise ContractError(f"features of dimension {x.shape[1]} do not fit model {w.shape_tag}")
    acc = float(np.mean(predict(w, x) == y))
    return xent(w.values, x, y, w.C), acc


def random_model(d_x: int, C: int, rng: np.random.Generator, scale: float = 1.0) -> ModelVector:
    return ModelVector(scale * rng.standard_normal(C * d_x + C), (d_x, C))


def check_solver(spec: SolverSpec) -> None:
    problems = spec.validate()
    if problems:
        raise ConfigError(problems)
