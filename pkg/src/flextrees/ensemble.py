"""Soft tree ensemble in supernode form.

Node ``i`` of every tree is stacked into one supernode: its hyperplanes form
a ``(p, m)`` matrix per task so routing for all ``m`` trees is one product.
Nodes use heap numbering (root 0, children ``2i+1``/``2i+2``), internal nodes
first and leaves after them.

Tensor layout::

    split_weights  (2**d - 1, G, p, m)   G = 1 if share_splits else T
    leaf_weights   (2**d,     T, m, k)

Pre-activations for all supernodes come from one product per task group.
The routing and gradient loops are compiled and run per sample with the tree
axis innermost. A smooth-step routing factor of exactly 0 or 1 gives a child
reach probability of exactly zero; such subtrees are not evaluated in either
pass and ``ForwardTrace.visited`` is False for them. ``oracle_forward`` is
the independent per-tree reference.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numba
import numpy as np

from . import kernel
from .activation import make_activation
from .rng import stream


@dataclass(frozen=True)
class EnsembleConfig:
    num_trees: int
    depth: int
    num_features: int
    num_heads: int = 1
    num_tasks: int = 1
    gamma: float = 1.0
    activation: str = "smoothstep"
    share_splits: bool = False

    def __post_init__(self):
        for name in ("num_trees", "depth", "num_features", "num_heads", "num_tasks"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        make_activation(self.activation, self.gamma)

    @property
    def num_internal(self) -> int:
        return 2**self.depth - 1

    @property
    def num_leaves(self) -> int:
        return 2**self.depth

    @property
    def num_nodes(self) -> int:
        return 2 ** (self.depth + 1) - 1

    @property
    def num_split_groups(self) -> int:
        return 1 if self.share_splits else self.num_tasks

    @cached_property
    def act(self):
        return make_activation(self.activation, self.gamma)

    def split_shape(self) -> tuple:
        return (self.num_internal, self.num_split_groups, self.num_features, self.num_trees)

    def leaf_shape(self) -> tuple:
        return (self.num_leaves, self.num_tasks, self.num_trees, self.num_heads)

    def with_(self, **changes) -> "EnsembleConfig":
        return replace(self, **changes)


@dataclass
class EnsembleParams:
    split_weights: np.ndarray
    leaf_weights: np.ndarray

    names = ("split_weights", "leaf_weights")

    def blocks(self):
        return [(n, getattr(self, n)) for n in self.names]

    def copy(self) -> "EnsembleParams":
        return EnsembleParams(self.split_weights.copy(), self.leaf_weights.copy())

    @classmethod
    def zeros(cls, cfg: EnsembleConfig) -> "EnsembleParams":
        return cls(np.zeros(cfg.split_shape()), np.zeros(cfg.leaf_shape()))

    def validate(self, cfg: EnsembleConfig) -> None:
        for name, expected in (("split_weights", cfg.split_shape()), ("leaf_weights", cfg.leaf_shape())):
            arr = getattr(self, name)
            if arr.shape != expected:
                raise ValueError(f"{name} has shape {arr.shape}, config requires {expected}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")


@dataclass
class ForwardTrace:
    """What backward needs from a forward pass: the pre-activations.

    Routing factors, reach probabilities and subtree values are cheap to
    rebuild from the pre-activations and the leaf weights, so they are
    recomputed per sample instead of being stored; the properties below
    materialize them when asked. ``pre_activations`` and ``routing`` are
    (B, I, G, m), ``reach`` is (B, N, T, m) and ``values`` is
    (B, N, T, m, k) over all N nodes.
    """

    cfg: EnsembleConfig
    pre_activations: np.ndarray
    leaf_weights: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.pre_activations.shape[0]

    def _details(self):
        if not hasattr(self, "_cache"):
            cfg = self.cfg
            B, I, G, m = self.pre_activations.shape
            N, T, k = cfg.num_nodes, cfg.num_tasks, cfg.num_heads
            S = np.empty((B, I, G, m))
            dS = np.empty((B, I, G, m))
            reach = np.empty((B, N, T, m))
            values = np.empty((B, N, T, k, m))
            _details(self.pre_activations, self.leaf_weights, _task_groups(cfg), _act_code(cfg),
                     float(cfg.gamma), S, dS, reach, values)
            self._cache = (S, dS, reach, values.transpose(0, 1, 2, 4, 3))
        return self._cache

    @property
    def routing(self) -> np.ndarray:
        return self._details()[0]

    @property
    def routing_deriv(self) -> np.ndarray:
        return self._details()[1]

    @property
    def reach(self) -> np.ndarray:
        return self._details()[2]

    @property
    def values(self) -> np.ndarray:
        return self._details()[3]

    @property
    def visited(self) -> np.ndarray:
        return self.reach > 0.0


class StaleTraceError(ValueError):
    pass


def _check_inputs(cfg: EnsembleConfig, X) -> np.ndarray:
    X = kernel.as_real(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != cfg.num_features:
        raise kernel.ShapeError("forward", (None, cfg.num_features), X.shape)
    if not np.all(np.isfinite(X)):
        raise ValueError("input features contain non-finite values")
    return X


def _pre_activations(cfg: EnsembleConfig, W: np.ndarray, X: np.ndarray) -> np.ndarray:
    # One product per split group keeps each task's arithmetic independent of
    # how many tasks are stacked beside it.
    I, G, p, m = W.shape
    if G == 1:
        Wg = np.ascontiguousarray(W[:, 0].transpose(1, 0, 2)).reshape(p, I * m)
        return kernel.batched_matvec(Wg, X).reshape(-1, I, 1, m)
    A = np.empty((X.shape[0], I, G, m))
    for g in range(G):
        Wg = np.ascontiguousarray(W[:, g].transpose(1, 0, 2)).reshape(p, I * m)
        A[:, :, g, :] = kernel.batched_matvec(Wg, X).reshape(-1, I, m)
    return A


_SMOOTHSTEP, _LOGISTIC = 0, 1


@numba.njit(cache=True, nogil=True, inline="always")
def _activate(a, code, gamma):
    """Routing factor and its derivative at one pre-activation."""
    if code == _SMOOTHSTEP:
        h = 0.5 * gamma
        t = min(max(a, -h), h)
        t2 = t * t
        s = (t2 * (-2.0 / gamma**3) + 1.5 / gamma) * t + 0.5
        d = t2 * (-6.0 / gamma**3) + 1.5 / gamma
        s = 0.0 if a <= -h else s
        s = 1.0 if a >= h else s
        d = 0.0 if abs(a) >= h else d
        return s, d
    s = 1.0 / (1.0 + np.exp(-a / gamma))
    return s, s * (1.0 - s) / gamma


@numba.njit(cache=True, nogil=True)
def _sample_pass(A, O, b, t, g, code, gamma, S, dS, reach, values):
    """Fill per-sample scratch for one (sample, task) with trees innermost.

    ``S``/``dS`` are (I, m), ``reach`` is (N, m), ``values`` is (N, k, m).
    Reach is a product of routing factors, so everything under an exact 0
    or 1 gets reach exactly zero; those subtrees store value zero and their
    parents weight them by that same exact zero.
    """
    I = S.shape[0]
    m = S.shape[1]
    L = O.shape[0]
    k = O.shape[3]
    for i in range(I):
        for j in range(m):
            s, d = _activate(A[b, i, g, j], code, gamma)
            S[i, j] = s
            dS[i, j] = d
    for j in range(m):
        reach[0, j] = 1.0
    for i in range(I):
        for j in range(m):
            r = reach[i, j]
            s = S[i, j]
            reach[2 * i + 1, j] = r * s
            reach[2 * i + 2, j] = r * (1.0 - s)
    for leaf in range(L):
        for h in range(k):
            for j in range(m):
                values[I + leaf, h, j] = O[leaf, t, j, h] if reach[I + leaf, j] != 0.0 else 0.0
    for i in range(I - 1, -1, -1):
        for h in range(k):
            for j in range(m):
                s = S[i, j]
                v = s * values[2 * i + 1, h, j] + (1.0 - s) * values[2 * i + 2, h, j]
                values[i, h, j] = v if reach[i, j] != 0.0 else 0.0


@numba.njit(cache=True, nogil=True)
def _forward(A, O, task_group, code, gamma, pred):
    B, I, G, m = A.shape
    L, T, _, k = O.shape
    S = np.empty((I, m))
    dS = np.empty((I, m))
    reach = np.empty((I + L, m))
    values = np.empty((I + L, k, m))
    for b in range(B):
        for t in range(T):
            _sample_pass(A, O, b, t, task_group[t], code, gamma, S, dS, reach, values)
            for h in range(k):
                acc = 0.0
                for j in range(m):
                    acc += values[0, h, j]
                pred[b, t, h] = acc


@numba.njit(cache=True, nogil=True)
def _backward(A, O, G_out, task_group, code, gamma, dA, dO):
    """Pre-activation and leaf gradients; the batch is reduced in index order.

    An unreached or saturated node contributes an exact zero to ``dA``.
    """
    B, I, G, m = A.shape
    L, T, _, k = O.shape
    S = np.empty((I, m))
    dS = np.empty((I, m))
    reach = np.empty((I + L, m))
    values = np.empty((I + L, k, m))
    dA[:] = 0.0
    dO[:] = 0.0
    for b in range(B):
        for t in range(T):
            g = task_group[t]
            _sample_pass(A, O, b, t, g, code, gamma, S, dS, reach, values)
            for leaf in range(L):
                for h in range(k):
                    gh = G_out[b, t, h]
                    for j in range(m):
                        dO[leaf, t, j, h] += reach[I + leaf, j] * gh
            for i in range(I):
                for j in range(m):
                    proj = 0.0
                    for h in range(k):
                        proj += (values[2 * i + 1, h, j] - values[2 * i + 2, h, j]) * G_out[b, t, h]
                    dA[b, i, g, j] += reach[i, j] * dS[i, j] * proj


@numba.njit(cache=True, nogil=True)
def _details(A, O, task_group, code, gamma, S_out, dS_out, reach_out, values_out):
    B, I, G, m = A.shape
    L, T, _, k = O.shape
    S = np.empty((I, m))
    dS = np.empty((I, m))
    reach = np.empty((I + L, m))
    values = np.empty((I + L, k, m))
    for b in range(B):
        for t in range(T):
            g = task_group[t]
            _sample_pass(A, O, b, t, g, code, gamma, S, dS, reach, values)
            S_out[b, :, g, :] = S
            dS_out[b, :, g, :] = dS
            reach_out[b, :, t, :] = reach
            values_out[b, :, t, :, :] = values


def _act_code(cfg: EnsembleConfig) -> int:
    return _SMOOTHSTEP if cfg.activation == "smoothstep" else _LOGISTIC


def _task_groups(cfg: EnsembleConfig) -> np.ndarray:
    if cfg.share_splits:
        return np.zeros(cfg.num_tasks, dtype=np.int64)
    return np.arange(cfg.num_tasks, dtype=np.int64)


def forward(cfg: EnsembleConfig, params: EnsembleParams, X, keep_trace: bool = True):
    """Return ``(predictions (B, T, k), trace)``; trace is None if not kept."""
    X = _check_inputs(cfg, X)
    B = X.shape[0]
    T, k = cfg.num_tasks, cfg.num_heads
    O = np.ascontiguousarray(params.leaf_weights)

    A = _pre_activations(cfg, params.split_weights, X)
    pred = np.empty((B, T, k))
    _forward(A, O, _task_groups(cfg), _act_code(cfg), float(cfg.gamma), pred)
    return pred, (ForwardTrace(cfg, A, O) if keep_trace else None)


def predict(cfg: EnsembleConfig, params: EnsembleParams, X) -> np.ndarray:
    return forward(cfg, params, X, keep_trace=False)[0]


def backward(cfg: EnsembleConfig, params: EnsembleParams, trace: ForwardTrace, X, output_grads) -> EnsembleParams:
    """Gradients of ``sum_b <output_grads[b], predictions[b]>`` w.r.t. params."""
    X = _check_inputs(cfg, X)
    g = np.ascontiguousarray(output_grads, dtype=np.float64)
    B = X.shape[0]
    I, T, G, m, k = cfg.num_internal, cfg.num_tasks, cfg.num_split_groups, cfg.num_trees, cfg.num_heads
    if trace is None or trace.cfg != cfg or trace.batch_size != B:
        raise StaleTraceError("trace was not produced by a forward pass on this batch and config")
    if trace.pre_activations.shape != (B, I, G, m):
        raise StaleTraceError(f"trace pre-activations {trace.pre_activations.shape} do not match config")
    if g.shape != (B, T, k):
        raise kernel.ShapeError("backward", (B, T, k), g.shape)

    O = np.ascontiguousarray(params.leaf_weights)
    grads = EnsembleParams.zeros(cfg)
    dA = np.empty((B, I, G, m))
    _backward(trace.pre_activations, O, g, _task_groups(cfg), _act_code(cfg), float(cfg.gamma), dA, grads.leaf_weights)

    p = cfg.num_features
    if G == 1:
        D = dA.reshape(B, I * m)
        grads.split_weights[:, 0] = kernel.outer_accumulate(X, D).reshape(p, I, m).transpose(1, 0, 2)
        return grads
    for grp in range(G):
        D = np.ascontiguousarray(dA[:, :, grp, :]).reshape(B, I * m)
        grads.split_weights[:, grp] = kernel.outer_accumulate(X, D).reshape(p, I, m).transpose(1, 0, 2)
    return grads


def oracle_forward(cfg: EnsembleConfig, params: EnsembleParams, x) -> np.ndarray:
    """Reference prediction for one sample, one tree at a time with scalar loops.

    Each leaf's probability is the product of the routing decisions on its
    root path; the tree output is the probability-weighted sum of leaf values
    and the ensemble output is the sum over trees. Subtrees reached with
    probability exactly zero are not descended.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != cfg.num_features:
        raise kernel.ShapeError("oracle_forward", (cfg.num_features,), x.shape)
    W = params.split_weights
    O = params.leaf_weights
    act = cfg.act
    I = cfg.num_internal
    out = np.zeros((cfg.num_tasks, cfg.num_heads))

    for t in range(cfg.num_tasks):
        grp = 0 if cfg.share_splits else t
        for j in range(cfg.num_trees):
            tree_out = [0.0] * cfg.num_heads
            stack = [(0, 1.0)]
            while stack:
                node, prob = stack.pop()
                if prob == 0.0:
                    continue
                if node >= I:
                    leaf = node - I
                    for h in range(cfg.num_heads):
                        tree_out[h] += prob * float(O[leaf, t, j, h])
                    continue
                a = 0.0
                for f in range(cfg.num_features):
                    a += float(W[node, grp, f, j]) * float(x[f])
                s = float(act(a))
                stack.append((2 * node + 2, prob * (1.0 - s)))
                stack.append((2 * node + 1, prob * s))
            for h in range(cfg.num_heads):
                out[t, h] += tree_out[h]
    return out


def init_params(cfg: EnsembleConfig, seed: int, member: int = 0) -> EnsembleParams:
    """Uniform hyperplanes on +-gamma/(2 sqrt(p)); zero leaves.

    Each split group draws from its own stream, so task ``t``'s slice is the
    same whatever the number of tasks. ``member`` separates the streams of
    ensembles that belong to one model.
    """
    bound = cfg.gamma / (2.0 * np.sqrt(cfg.num_features))
    params = EnsembleParams.zeros(cfg)
    shape = (cfg.num_internal, cfg.num_features, cfg.num_trees)
    for grp in range(cfg.num_split_groups):
        params.split_weights[:, grp] = stream(seed, "init", member, grp).uniform(-bound, bound, size=shape)
    return params


def node_depth(i: int) -> int:
    return (int(i) + 1).bit_length() - 1
