import numpy as np
import pytest

from flextrees.ensemble import (EnsembleConfig, EnsembleParams, StaleTraceError, backward, forward, init_params,
                                node_depth, oracle_forward, predict)
from flextrees.kernel import ShapeError
from flextrees.oracle import finite_diff_params


def stump(w, leaves=(2.0, 4.0)):
    cfg = EnsembleConfig(1, 1, 1)
    params = EnsembleParams(np.full((1, 1, 1, 1), w), np.array(leaves).reshape(2, 1, 1, 1))
    return cfg, params


def random_instance(rng, scale=4.0, **kw):
    opts = dict(num_trees=int(rng.integers(1, 9)), depth=int(rng.integers(1, 4)),
                num_features=int(rng.integers(1, 6)), num_heads=int(rng.integers(1, 3)),
                num_tasks=int(rng.integers(1, 3)), gamma=float(rng.uniform(0.5, 2)),
                share_splits=bool(rng.random() < 0.3))
    opts.update(kw)
    cfg = EnsembleConfig(**opts)
    params = init_params(cfg, int(rng.integers(1 << 30)))
    params.split_weights *= scale
    params.leaf_weights[:] = rng.normal(size=cfg.leaf_shape())
    return cfg, params


def test_uniform_routing_averages_leaves():
    cfg, params = stump(0.0)
    assert predict(cfg, params, [[1.7]])[0, 0, 0] == 3.0
    assert oracle_forward(cfg, params, [1.7])[0, 0] == 3.0


def test_saturated_root_picks_left_leaf():
    cfg, params = stump(1.0)
    pred, trace = forward(cfg, params, [[0.5]])
    assert pred[0, 0, 0] == 2.0
    assert trace.visited[0, :, 0, 0].tolist() == [True, True, False]


def test_matches_oracle(rng):
    worst = 0.0
    for n in range(300):
        cfg, params = random_instance(rng, activation="logistic" if n % 3 == 0 else "smoothstep")
        X = rng.normal(size=(3, cfg.num_features))
        pred = predict(cfg, params, X)
        for b in range(3):
            worst = max(worst, np.abs(pred[b] - oracle_forward(cfg, params, X[b])).max())
    assert worst <= 1e-10


def test_hard_routing_equals_classical_tree():
    # depth 2, large weights: every split saturates, one leaf gets all the mass
    cfg = EnsembleConfig(1, 2, 2)
    W = np.zeros(cfg.split_shape())
    W[0, 0, :, 0] = [10.0, 0.0]   # root: x0 > 0 goes left
    W[1, 0, :, 0] = [0.0, 10.0]   # left child: x1 > 0 goes left
    W[2, 0, :, 0] = [0.0, -10.0]  # right child: x1 < 0 goes left
    O = np.arange(1.0, 5.0).reshape(4, 1, 1, 1)
    params = EnsembleParams(W, O)
    X = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)
    assert predict(cfg, params, X)[:, 0, 0].tolist() == [1.0, 2.0, 3.0, 4.0]


def test_reach_is_a_distribution(rng):
    for _ in range(20):
        cfg, params = random_instance(rng)
        _, trace = forward(cfg, params, rng.normal(size=(5, cfg.num_features)))
        leaves = trace.reach[:, cfg.num_internal:]
        np.testing.assert_allclose(leaves.sum(axis=1), 1.0, rtol=0, atol=1e-14)


def test_backward_matches_differences(rng):
    for _ in range(15):
        cfg, params = random_instance(rng, scale=1.5)
        X = rng.normal(size=(4, cfg.num_features))
        Y = rng.normal(size=(4, cfg.num_tasks, cfg.num_heads))

        def loss(p):
            return 0.5 * np.sum((predict(cfg, p, X) - Y) ** 2)

        pred, trace = forward(cfg, params, X)
        grads = backward(cfg, params, trace, X, pred - Y)
        fd = finite_diff_params(loss, params, 1e-5)
        for a, b in ((grads.split_weights, fd.split_weights), (grads.leaf_weights, fd.leaf_weights)):
            err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
            assert err.max() < 1e-5


def test_saturated_split_gradients_are_zero(rng):
    cfg, params = random_instance(rng, scale=1e4, num_tasks=1, num_heads=1)
    X = rng.normal(size=(6, cfg.num_features))
    pred, trace = forward(cfg, params, X)
    assert np.all(np.isin(trace.routing, (0.0, 1.0)))
    g = rng.normal(size=pred.shape)
    grads = backward(cfg, params, trace, X, g)
    assert not grads.split_weights.any()
    reach = trace.reach[:, cfg.num_internal:, 0, :]  # (B, L, m)
    expected = np.einsum("blm,bk->lmk", reach, g[:, 0, :])
    np.testing.assert_allclose(grads.leaf_weights[:, 0], expected, atol=1e-14)


def test_zero_output_gradients(rng):
    cfg, params = random_instance(rng)
    X = rng.normal(size=(3, cfg.num_features))
    pred, trace = forward(cfg, params, X)
    grads = backward(cfg, params, trace, X, np.zeros_like(pred))
    assert not grads.split_weights.any() and not grads.leaf_weights.any()


def test_unreached_subtrees_do_not_matter(rng):
    # leaves behind a saturated split can hold anything, even huge values
    cfg, params = stump(1.0)
    params.leaf_weights[1] = 1e300
    pred, trace = forward(cfg, params, [[0.6]])
    assert pred[0, 0, 0] == 2.0
    grads = backward(cfg, params, trace, [[0.6]], np.ones((1, 1, 1)))
    assert grads.leaf_weights[1, 0, 0, 0] == 0.0


def test_task_order_symmetry(rng):
    cfg, params = random_instance(rng, num_tasks=2, share_splits=False)
    X = rng.normal(size=(4, cfg.num_features))
    swapped = EnsembleParams(params.split_weights[:, ::-1].copy(), params.leaf_weights[:, ::-1].copy())
    assert np.array_equal(predict(cfg, params, X)[:, ::-1], predict(cfg, swapped, X))


def test_init_params(rng):
    cfg = EnsembleConfig(20, 3, 6, 2, 2)
    a, b = init_params(cfg, 4), init_params(cfg, 4)
    assert np.array_equal(a.split_weights, b.split_weights)
    assert not np.array_equal(a.split_weights, init_params(cfg, 5).split_weights)
    assert not a.leaf_weights.any()
    assert not predict(cfg, a, rng.normal(size=(10, 6))).any()
    bound = cfg.gamma / (2 * np.sqrt(6))
    assert np.abs(a.split_weights).max() <= bound
    _, trace = forward(cfg, a, rng.standard_normal(size=(1000, 6)))
    inside = np.abs(trace.pre_activations) < cfg.gamma / 2
    assert inside.mean() >= 0.9


def test_stale_trace(rng):
    cfg, params = random_instance(rng)
    X = rng.normal(size=(3, cfg.num_features))
    pred, trace = forward(cfg, params, X)
    with pytest.raises(StaleTraceError):
        backward(cfg, params, trace, X[:2], pred[:2])
    with pytest.raises(StaleTraceError):
        backward(cfg.with_(num_trees=cfg.num_trees + 1), params, trace, X, pred)
    with pytest.raises(StaleTraceError):
        backward(cfg, params, None, X, pred)
    with pytest.raises(ShapeError):
        forward(cfg, params, np.zeros((2, cfg.num_features + 1)))


def test_node_depth():
    assert [node_depth(i) for i in range(7)] == [0, 1, 1, 2, 2, 2, 2]


def test_bad_config():
    with pytest.raises(ValueError):
        EnsembleConfig(0, 2, 3)
    with pytest.raises(ValueError):
        EnsembleConfig(1, 2, 3, activation="tanh")
