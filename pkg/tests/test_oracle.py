import math

import numpy as np
import pytest

from flextrees.ensemble import EnsembleConfig, backward, forward, init_params
from flextrees.oracle import (SyntheticSpec, finite_diff_grad, finite_diff_params, generate,
                              looped_forward_backward, supernode_forward_backward, truncated_sum)


def test_quadratic_gradient():
    g = finite_diff_grad(lambda t: 0.5 * np.sum(t**2), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [1.0, 2.0], atol=1e-8)


def test_constant_gradient():
    assert not finite_diff_grad(lambda t: 3.0, np.ones((2, 3))).any()


def test_params_are_restored():
    theta = np.array([0.5, -1.5])
    finite_diff_grad(lambda t: float(np.sum(np.sin(t))), theta)
    assert theta.tolist() == [0.5, -1.5]


def test_ensemble_gradient_matches_backward(rng):
    cfg = EnsembleConfig(3, 2, 3, 1, 2)
    params = init_params(cfg, 1)
    params.leaf_weights[:] = rng.normal(size=cfg.leaf_shape())
    X = rng.normal(size=(5, 3))
    pred, trace = forward(cfg, params, X)
    grads = backward(cfg, params, trace, X, np.ones_like(pred))
    fd = finite_diff_params(lambda p: float(forward(cfg, p, X, keep_trace=False)[0].sum()), params)
    np.testing.assert_allclose(grads.split_weights, fd.split_weights, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(grads.leaf_weights, fd.leaf_weights, rtol=1e-6, atol=1e-9)


def test_truncated_sum():
    assert truncated_sum(lambda y: 0.5 ** (y + 1), 60) == pytest.approx(1.0, abs=1e-15)


def test_zip_generator():
    data = generate(SyntheticSpec("zip_counts", n=500, pi=0.0))
    assert not data.responses.any()
    data = generate(SyntheticSpec("zip_counts", n=100_000, pi=0.7, mu=2.0, seed=1))
    zeros = float(np.mean(data.responses == 0))
    assert abs(zeros - (0.3 + 0.7 * math.exp(-2.0))) < 0.01


def test_multitask_generator():
    data = generate(SyntheticSpec("related_multitask", n=50, rho=1.0, noise=0.0, num_tasks=4))
    assert np.all(data.responses == data.responses[:, :1])
    masked = generate(SyntheticSpec("related_multitask", n=2000, missing_rate=0.3))
    assert abs(1 - masked.mask.mean() - 0.3) < 0.03
    assert np.all(np.isnan(masked.responses[~masked.mask]))


def test_generators_are_reproducible():
    for kind in ("two_clusters_classification", "linear_regression", "zip_counts", "nb_counts",
                 "related_multitask"):
        a, b = generate(SyntheticSpec(kind, n=30, seed=9)), generate(SyntheticSpec(kind, n=30, seed=9))
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.responses, b.responses, equal_nan=True)


def test_nb_generator_overdispersed():
    data = generate(SyntheticSpec("nb_counts", n=50_000, mu=2.0, phi=2.0, seed=2))
    y = data.responses[:, 0]
    assert y.mean() == pytest.approx(2.0, rel=0.03)
    assert y.var() == pytest.approx(4.0, rel=0.06)


def test_generator_rejects_bad_spec():
    with pytest.raises(ValueError):
        SyntheticSpec("gaussian_blobs")
    with pytest.raises(ValueError):
        SyntheticSpec("zip_counts", p=2)


def test_looped_baseline_agrees(rng):
    cfg = EnsembleConfig(6, 3, 4, 2, 2)
    params = init_params(cfg, 3)
    params.leaf_weights[:] = rng.normal(size=cfg.leaf_shape())
    X = rng.normal(size=(20, 4))
    G = rng.normal(size=(20, 2, 2))
    a = looped_forward_backward(cfg, params, X, G)
    b = supernode_forward_backward(cfg, params, X, G)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1].split_weights, b[1].split_weights, atol=1e-12)
    np.testing.assert_allclose(a[1].leaf_weights, b[1].leaf_weights, atol=1e-12)
