"""Synthetic non-iid federated datasets, train/test splitting and JSON-lines I/O.

Generation follows the usual synthetic FL benchmark: every device owns a
softmax-argmax labelling map ``(W_k, b_k)`` and a feature mean ``v_k``. ``beta``
controls how far the labelling maps drift between devices and ``gamma`` how far
the feature distributions drift. Normal distributions are parametrised by
their standard deviation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ParseError, SchemaError, SplitError

COV_EXPONENT = -1.2


class Sample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class DeviceShard:
    device_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        if len(self.train_y) == 0:
            raise SchemaError(f"device {self.device_id} has no training samples")
        if self.train_x.shape[0] != self.train_y.shape[0]:
            raise SchemaError(f"device {self.device_id}: train x/y length mismatch")
        if self.test_x.shape[0] != self.test_y.shape[0]:
            raise SchemaError(f"device {self.device_id}: test x/y length mismatch")

    @property
    def n_train(self) -> int:
        return int(self.train_y.shape[0])

    @property
    def n_test(self) -> int:
        return int(self.test_y.shape[0])

    @property
    def train(self) -> list[Sample]:
        return [Sample(x, int(y)) for x, y in zip(self.train_x, self.train_y)]

    @property
    def test(self) -> list[Sample]:
        return [Sample(x, int(y)) for x, y in zip(self.test_x, self.test_y)]

    def same_as(self, other: "DeviceShard") -> bool:
        return (
            self.device_id == other.device_id
            and np.array_equal(self.train_x, other.train_x)
            and np.array_equal(self.train_y, other.train_y)
            and np.array_equal(self.test_x, other.test_x)
            and np.array_equal(self.test_y, other.test_y)
        )


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    devices: tuple[DeviceShard, ...]
    d_x: int
    C: int
    seed: int | None = None
    # generating state per device: {"W": (C, d_x), "b": (C,), "v": (d_x,)}; not serialised
    generators: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if not self.devices:
            raise SchemaError("dataset has no devices")
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate device ids")
        for d in self.devices:
            for x, y, split in ((d.train_x, d.train_y, "train"), (d.test_x, d.test_y, "test")):
                if len(y) == 0:
                    continue
                if x.ndim != 2 or x.shape[1] != self.d_x:
                    raise SchemaError(f"device {d.device_id} {split} features are not of dimension {self.d_x}")
                if y.min() < 0 or y.max() >= self.C:
                    raise SchemaError(f"device {d.device_id} {split} has a label outside [0, {self.C})")
                if not np.all(np.isfinite(x)):
                    raise SchemaError(f"device {d.device_id} {split} has non-finite features")

    def __len__(self) -> int:
        return len(self.devices)

    def __iter__(self) -> Iterator[DeviceShard]:
        return iter(self.devices)

    @property
    def weights(self) -> np.ndarray:
        """``p_i``: each device's share of the training samples."""
        sizes = np.array([d.n_train for d in self.devices], dtype=float)
        return sizes / sizes.sum()

    def same_as(self, other: "FederatedDataset") -> bool:
        return (
            self.d_x == other.d_x
            and self.C == other.C
            and len(self.devices) == len(other.devices)
            and all(a.same_as(b) for a, b in zip(self.devices, other.devices))
        )


@dataclass(frozen=True)
class SizeSpec:
    """Per-device sample counts: a fixed ``n`` or a clamped lognormal draw."""

    kind: str = "lognormal"
    n: int = 150
    mu_ln: float = math.log(150.0)
    sigma_ln: float = 1.0
    min_n: int = 20
    max_n: int = 1000

    @classmethod
    def fixed(cls, n: int) -> "SizeSpec":
        return cls(kind="fixed", n=n)

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in ("fixed", "lognormal"):
            problems.append(f"size kind must be 'fixed' or 'lognormal', got {self.kind!r}")
        elif self.kind == "fixed" and self.n < 1:
            problems.append("fixed size n must be >= 1")
        elif self.kind == "lognormal":
            if self.sigma_ln < 0:
                problems.append("sigma_ln must be >= 0")
            if not 1 <= self.min_n <= self.max_n:
                problems.append("need 1 <= min_n <= max_n")
        return problems

    def draw(self, num_devices: int, gen: np.random.Generator) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(num_devices, self.n, dtype=int)
        raw = gen.lognormal(self.mu_ln, self.sigma_ln, size=num_devices)
        return np.clip(np.floor(raw), self.min_n, self.max_n).astype(int)


def feature_covariance(d_x: int) -> np.ndarray:
    """Diagonal of the feature covariance, ``j ** -1.2`` for ``j = 1..d_x``."""
    return np.arange(1, d_x + 1, dtype=float) ** COV_EXPONENT


def draw_features(v: np.ndarray, n: int, gen: np.random.Generator) -> np.ndarray:
    sd = np.sqrt(feature_covariance(v.shape[0]))
    return v + gen.standard_normal((n, v.shape[0])) * sd


def label(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    # softmax is monotone, so argmax of the logits is argmax of softmax
    return np.argmax(x @ W.T + b, axis=1)


def generate_synthetic(
    beta: float,
    gamma: float,
    iid: bool,
    num_devices: int,
    d_x: int,
    C: int,
    size_spec: SizeSpec | None = None,
    seed: int = 0,
) -> FederatedDataset:
    """Generate Syn(beta, gamma) (or Syn(iid) when ``iid``).

    All samples land in the training split; use :func:`split_train_test`
    afterwards. Each device draws from its own stream keyed by its id, so the
    result does not depend on generation order.
    """
    size_spec = size_spec or SizeSpec()
    problems = []
    if num_devices < 1:
        problems.append("num_devices must be >= 1")
    if d_x < 1:
        problems.append("d_x must be >= 1")
    if C < 2:
        problems.append("C must be >= 2")
    if beta < 0 or gamma < 0:
        problems.append("beta and gamma must be >= 0")
    problems += size_spec.validate()
    if problems:
        raise ConfigError(problems)

    sizes = size_spec.draw(num_devices, rngmod.stream(seed, rngmod.SIZES))
    shared = None
    if iid:
        g = rngmod.stream(seed, rngmod.DATA, num_devices)
        shared = (g.standard_normal((C, d_x)), g.standard_normal(C), g.standard_normal(d_x))

    devices, generators = [], {}
    for k in range(num_devices):
        g = rngmod.stream(seed, rngmod.DATA, k)
        if shared is not None:
            W, b, v = shared
        else:
            u_k = g.normal(0.0, beta)
            W = g.normal(u_k, 1.0, size=(C, d_x))
            b = g.normal(u_k, 1.0, size=C)
            B_k = g.normal(0.0, gamma)
            v = g.normal(B_k, 1.0, size=d_x)
        x = draw_features(v, int(sizes[k]), g)
        y = label(W, b, x)
        devices.append(
            DeviceShard(k, x, y.astype(np.int64), np.empty((0, d_x)), np.empty(0, dtype=np.int64))
        )
        generators[k] = {"W": W, "b": b, "v": v}
    return FederatedDataset(tuple(devices), d_x, C, seed, generators)


def normalize_features(dataset: FederatedDataset) -> FederatedDataset:
    """Divide every feature vector by the largest feature norm in the dataset.

    A single global scale keeps labels linearly realisable and gives
    ``||x|| <= 1`` everywhere, as objective perturbation requires.
    """
    norms = [np.linalg.norm(d.train_x, axis=1).max() for d in dataset]
    norms += [np.linalg.norm(d.test_x, axis=1).max() for d in dataset if d.n_test]
    scale = max(max(norms), 1e-300)
    devices = tuple(
        DeviceShard(d.device_id, d.train_x / scale, d.train_y, d.test_x / scale, d.test_y)
        for d in dataset
    )
    return FederatedDataset(devices, dataset.d_x, dataset.C, dataset.seed, dataset.generators)


def split_train_test(dataset: FederatedDataset, test_fraction: float, seed: int) -> FederatedDataset:
    """Per-device shuffled split; ``floor(f * n)`` samples go to test.

    Any existing test samples are pooled back in before splitting.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}")
    devices = []
    for d in dataset:
        x = np.concatenate([d.train_x, d.test_x]) if d.n_test else d.train_x
        y = np.concatenate([d.train_y, d.test_y]) if d.n_test else d.train_y
        n = len(y)
        if test_fraction > 0 and n < 2:
            raise SplitError(f"device {d.device_id} has {n} sample(s); need >= 2 to split")
        n_test = int(math.floor(test_fraction * n + 1e-9))
        order = rngmod.stream(seed, rngmod.SPLIT, d.device_id).permutation(n)
        tr, te = order[: n - n_test], order[n - n_test :]
        devices.append(DeviceShard(d.device_id, x[tr], y[tr], x[te].reshape(-1, dataset.d_x), y[te]))
    return FederatedDataset(tuple(devices), dataset.d_x, dataset.C, dataset.seed, dataset.generators)


def save_dataset(dataset: FederatedDataset, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"d_x": dataset.d_x, "C": dataset.C, "seed": dataset.seed}) + "\n")
        for d in dataset:
            for split, xs, ys in (("train", d.train_x, d.train_y), ("test", d.test_x, d.test_y)):
                for x, y in zip(xs, ys):
                    rec = {"device": d.device_id, "x": x.tolist(), "y": int(y), "split": split}
                    fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> FederatedDataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.readlines()
    if not lines:
        raise ParseError("empty file: missing header", line=1)
    try:
        header = json.loads(lines[0])
        d_x, C = int(header["d_x"]), int(header["C"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad header: {exc}", line=1) from None
    seed = header.get("seed")

    acc: dict[int, dict[str, tuple[list, list]]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            dev, x, y, split = int(rec["device"]), rec["x"], rec["y"], rec["split"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed record: {exc}", line=lineno) from None
        if split not in ("train", "test"):
            raise ParseError(f"split must be 'train' or 'test', got {split!r}", line=lineno)
        if not isinstance(x, list) or len(x) != d_x:
            raise SchemaError(f"feature vector length {len(x) if isinstance(x, list) else '?'} != d_x={d_x}", line=lineno)
        if not isinstance(y, int) or not 0 <= y < C:
            raise SchemaError(f"label {y!r} outside [0, {C})", line=lineno)
        xs, ys = acc.setdefault(dev, {"train": ([], []), "test": ([], [])})[split]
        xs.append(x)
        ys.append(y)
    if not acc:
        raise ParseError("dataset file lists no devices", line=len(lines))

    devices = []
    for dev, parts in acc.items():
        arrays = []
        for split in ("train", "test"):
            xs, ys = parts[split]
            arrays.append(np.array(xs, dtype=float).reshape(len(xs), d_x))
            arrays.append(np.array(ys, dtype=np.int64))
        if not len(arrays[1]):
            raise SchemaError(f"device {dev} has no training samples")
        devices.append(DeviceShard(dev, *arrays))
    return FederatedDataset(tuple(devices), d_x, C, seed)
