import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upcycled_fl import DiagnosticError
from upcycled_fl.analysis import (
    BoundInapplicable,
    ConvergenceParams,
    TrajectoryDiagnostics,
    constants,
    estimate_dissimilarity,
    estimate_smoothness,
    smoothness_from_gradient,
    theorem1_bound,
    theorem1_terms,
)
from upcycled_fl.data import DeviceShard, FederatedDataset, SizeSpec, generate_synthetic
from upcycled_fl.models import ModelVector, random_model


def test_single_device_dissimilarity_is_one(small_iid, rng):
    one = FederatedDataset(small_iid.devices[:1], small_iid.d_x, small_iid.C)
    assert estimate_dissimilarity(one, random_model(5, 3, rng)) == 1.0


def test_identical_shards_dissimilarity_is_one(small_iid, rng):
    d = small_iid.devices[0]
    clones = tuple(DeviceShard(i, d.train_x, d.train_y, d.test_x, d.test_y) for i in range(4))
    ds = FederatedDataset(clones, small_iid.d_x, small_iid.C)
    assert abs(estimate_dissimilarity(ds, random_model(5, 3, rng)) - 1.0) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), beta=st.floats(0, 2), iid=st.booleans())
def test_dissimilarity_at_least_one(seed, beta, iid):
    ds = generate_synthetic(beta, beta, iid, 5, 4, 3, SizeSpec.fixed(15), seed=seed)
    w = random_model(4, 3, np.random.default_rng(seed))
    assert estimate_dissimilarity(ds, w) >= 1 - 1e-9


def test_heterogeneity_raises_dissimilarity():
    for seed in range(4):
        het = generate_synthetic(1.0, 1.0, False, 30, 20, 10, seed=seed)
        hom = generate_synthetic(0.0, 0.0, False, 30, 20, 10, seed=seed)
        w = ModelVector.zeros(20, 10)
        assert estimate_dissimilarity(het, w) > estimate_dissimilarity(hom, w)


def test_vanishing_gradient_is_diagnostic_error():
    # two devices whose gradients cancel exactly at the zero model
    x = np.array([[1.0]])
    a = DeviceShard(0, x, np.array([0]), np.empty((0, 1)), np.empty(0, dtype=int))
    b = DeviceShard(1, x, np.array([1]), np.empty((0, 1)), np.empty(0, dtype=int))
    ds = FederatedDataset((a, b), 1, 2)
    with pytest.raises(DiagnosticError, match="away from the optimum"):
        estimate_dissimilarity(ds, ModelVector.zeros(1, 2))


def test_c1_without_dissimilarity_is_inverse_mu():
    for mu in (0.1, 1.0, 3.7):
        c1, _, _ = constants(ConvergenceParams(L=2.0, B=0.0, mu=mu, rho=1.5, K=10))
        assert c1 == 1.0 / mu


def test_c2_c3_decrease_in_lambda():
    base = dict(L=1.0, B=1.0, mu=1.0, rho=2.0, K=9)
    _, c2a, c3a = constants(ConvergenceParams(**base, lambda_m=0.0))
    _, c2b, c3b = constants(ConvergenceParams(**base, lambda_m=1.0))
    assert c2b < c2a and c3b < c3a
    sweep = [constants(ConvergenceParams(**base, lambda_m=lam)) for lam in np.linspace(0, 10, 20)]
    assert len({c[0] for c in sweep}) == 1
    assert all(a[1] > b[1] and a[2] > b[2] for a, b in zip(sweep, sweep[1:]))
    tail = constants(ConvergenceParams(**base, lambda_m=1e12))
    assert tail[1] < 1e-10 and tail[2] < 1e-20


def test_constants_frozen_values():
    # independent evaluation of the three expressions at L=1, B=1, mu=1, rho=2, K=9
    s = (2 / 9) ** 0.5
    c1 = 1 - 1 / 2 - 1 / 8 - 2 / 36 - (4 / 2) * s * (1 / 2)
    c2 = 1 / 2 + 2 + 3 / 4 + 4 / 36 + (4 + 2 * 3) / 4 * s
    c3 = 9 / 8 + 2 / 36 + 2 * 3 / 2 * s / 2
    got = constants(ConvergenceParams(L=1.0, B=1.0, mu=1.0, rho=2.0, K=9))
    assert got == pytest.approx((c1, c2, c3), rel=1e-14)


def test_static_trajectory_bound_is_initial_gap():
    diags = TrajectoryDiagnostics(np.array([0.5, 0.4, 0.3]), np.zeros(3))
    params = ConvergenceParams(L=1.0, B=0.0, mu=2.0, rho=2.0, K=5)
    c1 = constants(params)[0]
    assert theorem1_bound(diags, params, 1.3, 3) == pytest.approx(1.3 / (3 * c1), rel=1e-15)


def test_negative_c1_is_bound_inapplicable():
    diags = TrajectoryDiagnostics(np.ones(2), np.ones(2))
    params = ConvergenceParams(L=10.0, B=3.0, mu=1.0, rho=1.0, K=2)
    assert constants(params)[0] < 0
    with pytest.raises(BoundInapplicable):
        theorem1_bound(diags, params, 1.0, 2)


def test_per_round_lambdas_shrink_drift_terms():
    diags = TrajectoryDiagnostics(np.full(4, 0.5), np.full(4, 0.2))
    params = ConvergenceParams(L=0.5, B=0.1, mu=2.0, rho=2.0, K=10)
    flat = theorem1_terms(diags, params, 1.0, 4)
    growing = theorem1_terms(diags, params, 1.0, 4, lambdas=[0.0, 1.0, 2.0, 3.0])
    assert growing.initial_gap == flat.initial_gap
    assert growing.drift_linear < flat.drift_linear
    assert growing.drift_quadratic < flat.drift_quadratic


def test_linear_probe_has_zero_smoothness(rng):
    const = rng.standard_normal(6)
    assert smoothness_from_gradient(lambda v: const, 6, 10, rng) == 0.0


def test_quadratic_probe_recovers_curvature(rng):
    A = np.diag([1.0, 4.0, 9.0])
    est = smoothness_from_gradient(lambda v: A @ v, 3, 200, rng)
    assert 1.0 <= est <= 9.0 + 1e-9


def test_scaling_features_raises_smoothness(small_iid):
    doubled = FederatedDataset(
        tuple(DeviceShard(d.device_id, 2 * d.train_x, d.train_y, d.test_x, d.test_y) for d in small_iid),
        small_iid.d_x, small_iid.C,
    )
    a = estimate_smoothness(small_iid, 10, np.random.default_rng(0))
    b = estimate_smoothness(doubled, 10, np.random.default_rng(0))
    assert b > a
