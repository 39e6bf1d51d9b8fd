"""Independent references for testing, synthetic data, and the speed benchmark.

Nothing here is used by training. ``looped_forward_backward`` evaluates the
ensemble one tree at a time, each tree vectorized over the batch with plain
numpy, and is the baseline the supernode path is timed against.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from . import kernel
from .dataio import Dataset
from .ensemble import EnsembleConfig, EnsembleParams, backward, forward, init_params, oracle_forward
from .rng import stream

__all__ = [
    "oracle_forward", "finite_diff_grad", "finite_diff_params", "truncated_sum", "series_moments",
    "SyntheticSpec", "generate", "looped_forward_backward", "benchmark",
]


def finite_diff_grad(loss_fn, params, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` at every coordinate of ``params``."""
    theta = np.array(params, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    g = grad.reshape(-1)
    for n in range(flat.size):
        keep = flat[n]
        flat[n] = keep + step
        up = loss_fn(theta)
        flat[n] = keep - step
        down = loss_fn(theta)
        flat[n] = keep
        g[n] = (up - down) / (2.0 * step)
    return grad


def finite_diff_params(loss_fn, params: EnsembleParams, step: float = 1e-5) -> EnsembleParams:
    """``finite_diff_grad`` over both blocks of an ``EnsembleParams``."""
    W, O = params.split_weights, params.leaf_weights
    gW = finite_diff_grad(lambda w: loss_fn(EnsembleParams(w, O)), W, step)
    gO = finite_diff_grad(lambda o: loss_fn(EnsembleParams(W, o)), O, step)
    return EnsembleParams(gW, gO)


def truncated_sum(pmf, upto: int) -> float:
    """``sum_{y=0}^{upto} pmf(y)`` added smallest-first."""
    vals = np.asarray(pmf(np.arange(upto + 1)), dtype=np.float64)
    return math.fsum(vals)


def series_moments(pmf, upto: int) -> tuple:
    y = np.arange(upto + 1, dtype=np.float64)
    p = np.asarray(pmf(y), dtype=np.float64)
    mean = math.fsum(y * p)
    var = math.fsum((y - mean) ** 2 * p)
    return mean, var


GENERATORS = ("two_clusters_classification", "linear_regression", "zip_counts", "nb_counts", "related_multitask")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str
    n: int = 1000
    p: int = 5
    seed: int = 0
    pi: float = 0.7            # zip_counts: base probability of the Poisson component
    mu: float = 2.0            # count models: base mean
    mu_max: float = math.inf   # count models: cap on the Poisson/NB mean
    pi_effect: float = 0.0     # zip_counts: logit slope on feature 0
    mu_effect: float = 0.0     # count models: log slope on features 1 and 2
    phi: float = 2.0           # nb_counts: dispersion
    separation: float = 4.0    # two_clusters_classification: distance between class centres
    noise: float = 0.0         # regression models: response noise sd
    num_tasks: int = 3         # related_multitask
    rho: float = 0.9           # related_multitask: task correlation in [0, 1]
    missing_rate: float = 0.0  # related_multitask: i.i.d. response masking

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ValueError(f"unknown generator {self.kind!r}; choose from {', '.join(GENERATORS)}")
        if self.n < 0 or self.p < 1:
            raise ValueError("n must be non-negative and p positive")
        if self.kind in ("zip_counts", "nb_counts") and self.p < 3:
            raise ValueError("count generators need p >= 3 (three informative features)")
        if not 0.0 <= self.pi <= 1.0 or not 0.0 <= self.rho <= 1.0 or not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("pi and rho must lie in [0, 1], missing_rate in [0, 1)")


def _count_mean(spec: SyntheticSpec, X: np.ndarray) -> np.ndarray:
    eta = math.log(spec.mu) + spec.mu_effect * (X[:, 1] + X[:, 2]) / math.sqrt(2.0)
    return np.minimum(np.exp(eta), spec.mu_max)


def generate(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset; the same spec always gives the same numbers."""
    rng = stream(spec.seed, "generate", GENERATORS.index(spec.kind))
    n, p = spec.n, spec.p
    X = rng.standard_normal((n, p))
    names = [f"x{j}" for j in range(p)]

    if spec.kind == "two_clusters_classification":
        direction = rng.standard_normal(p)
        direction /= np.linalg.norm(direction)
        label = (rng.random(n) < 0.5).astype(np.float64)
        X += np.outer(label - 0.5, direction) * spec.separation
        return Dataset(X, label[:, None], None, names, ["label"])

    if spec.kind == "linear_regression":
        beta = rng.standard_normal(p)
        y = X @ beta + spec.noise * rng.standard_normal(n)
        return Dataset(X, y[:, None], None, names, ["y"])

    if spec.kind == "zip_counts":
        if spec.pi in (0.0, 1.0):
            pi = np.full(n, spec.pi)
        else:
            pi = expit(logit(spec.pi) + spec.pi_effect * X[:, 0])
        d = rng.random(n) < pi
        y = np.where(d, rng.poisson(_count_mean(spec, X)), 0).astype(np.float64)
        return Dataset(X, y[:, None], None, names, ["count"])

    if spec.kind == "nb_counts":
        mu = _count_mean(spec, X)
        lam = rng.gamma(spec.phi, mu / spec.phi)
        y = rng.poisson(lam).astype(np.float64)
        return Dataset(X, y[:, None], None, names, ["count"])

    # related_multitask
    T = spec.num_tasks
    shared = rng.standard_normal(p)
    own = rng.standard_normal((T, p))
    betas = spec.rho * shared + math.sqrt(1.0 - spec.rho**2) * own
    Y = X @ betas.T + spec.noise * rng.standard_normal((n, T))
    mask = rng.random((n, T)) >= spec.missing_rate
    Y[~mask] = np.nan
    return Dataset(X, Y, mask, names, [f"task{t}" for t in range(T)])


def _act(cfg: EnsembleConfig, a: np.ndarray):
    act = cfg.act
    return act(a), act.deriv(a)


def looped_forward_backward(cfg: EnsembleConfig, params: EnsembleParams, X: np.ndarray, output_grads: np.ndarray):
    """Predictions and gradients computed tree by tree.

    Every tree gets its own small product and its own per-node numpy work
    over the batch. No state is shared between trees, so this is the
    straightforward implementation the supernode layout is meant to beat.
    Products go through the same kernels as the supernode path, so a timing
    comparison measures layout rather than the product implementation.
    """
    X = np.asarray(X, dtype=np.float64)
    G_out = np.asarray(output_grads, dtype=np.float64)
    B = X.shape[0]
    I, L, T, k = cfg.num_internal, cfg.num_leaves, cfg.num_tasks, cfg.num_heads
    W, O = params.split_weights, params.leaf_weights
    pred = np.zeros((B, T, k))
    gW = np.zeros_like(W)
    gO = np.zeros_like(O)
    for t in range(T):
        grp = 0 if cfg.share_splits else t
        g = G_out[:, t, :]
        for j in range(cfg.num_trees):
            A = kernel.batched_matvec(W[:, grp, :, j].T, X)  # (B, I)
            S, dS = _act(cfg, A)
            reach = [None] * (I + L)
            reach[0] = np.ones(B)
            for i in range(I):
                reach[2 * i + 1] = reach[i] * S[:, i]
                reach[2 * i + 2] = reach[i] * (1.0 - S[:, i])
            value = [None] * (I + L)
            for leaf in range(L):
                value[I + leaf] = np.broadcast_to(O[leaf, t, j], (B, k))
            for i in range(I - 1, -1, -1):
                s = S[:, i:i + 1]
                value[i] = s * value[2 * i + 1] + (1.0 - s) * value[2 * i + 2]
            pred[:, t, :] += value[0]
            for leaf in range(L):
                gO[leaf, t, j] += reach[I + leaf] @ g
            dA = np.empty((B, I))
            for i in range(I):
                proj = np.sum((value[2 * i + 1] - value[2 * i + 2]) * g, axis=1)
                dA[:, i] = reach[i] * dS[:, i] * proj
            gW[:, grp, :, j] += kernel.outer_accumulate(X, dA).T
    return pred, EnsembleParams(gW, gO)


def supernode_forward_backward(cfg: EnsembleConfig, params: EnsembleParams, X, output_grads):
    pred, trace = forward(cfg, params, X)
    return pred, backward(cfg, params, trace, X, output_grads)


@dataclass
class BenchResult:
    trees: int
    depth: int
    features: int
    batch: int
    repeats: int
    supernode_seconds: float
    looped_seconds: float
    max_abs_diff: float

    @property
    def speedup(self) -> float:
        return self.looped_seconds / self.supernode_seconds


def benchmark(trees: int = 100, depth: int = 4, features: int = 50, batch: int = 256,
              repeats: int = 15, seed: int = 0) -> BenchResult:
    """Median wall time of one forward+backward, supernode vs tree-by-tree."""
    cfg = EnsembleConfig(trees, depth, features)
    params = init_params(cfg, seed)
    params.leaf_weights[:] = stream(seed, "bench", 0).standard_normal(cfg.leaf_shape())
    X = stream(seed, "bench", 1).standard_normal((batch, features))
    G = stream(seed, "bench", 2).standard_normal((batch, 1, 1))

    p_sup, g_sup = supernode_forward_backward(cfg, params, X, G)  # also compiles kernels
    p_loop, g_loop = looped_forward_backward(cfg, params, X, G)
    diff = max(np.abs(p_sup - p_loop).max(), np.abs(g_sup.split_weights - g_loop.split_weights).max(),
               np.abs(g_sup.leaf_weights - g_loop.leaf_weights).max())

    def timed(fn):
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(cfg, params, X, G)
            ts.append(time.perf_counter() - t0)
        return float(np.median(ts))

    return BenchResult(trees, depth, features, batch, repeats,
                       timed(supernode_forward_backward), timed(looped_forward_backward), float(diff))
