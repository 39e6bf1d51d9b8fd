"""Dense float64 kernels used by the tree ensemble.

Arrays are plain C-ordered ``numpy.ndarray`` objects with the batch axis
first. The two products are compiled loops rather than BLAS calls: every
output element is accumulated over the contracted axis in index order, so a
row's result does not depend on how many rows share the call or where the
row sits in the batch. BLAS gemm gives no such guarantee.
"""

from __future__ import annotations

import numba
import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents do not conform."""

    def __init__(self, op: str, left: tuple, right: tuple):
        super().__init__(f"{op}: shape mismatch {tuple(left)} vs {tuple(right)}")
        self.op = op
        self.left = left
        self.right = right


def as_real(a, ndim: int | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    return arr


# Only FMA contraction is enabled: it changes rounding uniformly for every
# element but never reorders a sum, so results stay batch-independent.
_FAST = {"contract"}


@numba.njit(cache=True, nogil=True, fastmath=_FAST)
def _batched_matvec(X, W, out):
    B, p = X.shape
    n = W.shape[1]
    for b in range(B):
        o = out[b]
        o[:] = 0.0
        for f in range(p):
            x = X[b, f]
            w = W[f]
            for j in range(n):
                o[j] += x * w[j]


@numba.njit(cache=True, nogil=True, fastmath=_FAST)
def _outer_accumulate(X, D, out):
    B, p = X.shape
    n = D.shape[1]
    out[:] = 0.0
    # Column chunks keep one slice of every output row in cache while the
    # batch streams past; each element still sums over b in index order.
    C = 512
    for j0 in range(0, n, C):
        j1 = min(n, j0 + C)
        for f in range(p):
            o = out[f, j0:j1]
            for b in range(B):
                x = X[b, f]
                d = D[b, j0:j1]
                for j in range(j1 - j0):
                    o[j] += x * d[j]


def batched_matvec(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Return ``out[b, j] = sum_f W[f, j] * X[b, f]`` for W (p, m), X (B, p)."""
    W = as_real(W, 2)
    X = as_real(X, 2)
    if X.shape[1] != W.shape[0]:
        raise ShapeError("batched_matvec", W.shape, X.shape)
    out = np.empty((X.shape[0], W.shape[1]))
    _batched_matvec(X, W, out)
    return out


def matvec(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return ``W^T x`` for W (p, m) and x (p,)."""
    W = as_real(W, 2)
    x = as_real(x, 1)
    if x.shape[0] != W.shape[0]:
        raise ShapeError("matvec", W.shape, x.shape)
    return batched_matvec(W, x[None, :])[0]


def outer_accumulate(X: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Return ``sum_b outer(X[b], D[b])`` with shape (p, n).

    The transpose product behind weight gradients; the batch is reduced in
    index order.
    """
    X = as_real(X, 2)
    D = as_real(D, 2)
    if X.shape[0] != D.shape[0]:
        raise ShapeError("outer_accumulate", X.shape, D.shape)
    out = np.empty((X.shape[1], D.shape[1]))
    _outer_accumulate(X, D, out)
    return out
