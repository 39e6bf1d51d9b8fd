"""Losses on raw ensemble heads.

Every loss is vectorized over samples and returns the per-sample loss and
its derivative with respect to each head. Head order for the two-head
count models is ``(f_mu, f_pi)`` for ZIP and ``(f_mu, f_phi)`` for NB, with
``mu = exp(f_mu)``, ``pi = sigmoid(f_pi)`` the probability of the Poisson
component and ``phi = exp(f_phi)`` the NB dispersion.

The scalar helpers (``poisson_nll`` and friends) accept numbers or arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, expit, gammaln

from .ensemble import node_depth

OVERFLOW_LIMIT = 700.0
HEAD_CLAMP = 30.0


class OverflowGuardError(FloatingPointError):
    """A head that feeds ``exp`` is beyond the representable range."""


def _guard(name: str, f) -> None:
    f = np.asarray(f)
    if f.size and np.nanmax(f) > OVERFLOW_LIMIT:
        raise OverflowGuardError(f"{name} head exceeds {OVERFLOW_LIMIT:g} (max {np.nanmax(f):.6g}); exp would overflow")


def _log_sigmoid(f):
    return -np.logaddexp(0.0, -f)


def _sq(f, y):
    r = f - y
    return 0.5 * r * r, (r,)


def _logistic(f, y):
    return np.logaddexp(0.0, f) - y * f, (expit(f) - y,)


def _poisson(f, y):
    mu = np.exp(f)
    return mu - y * f, (mu - y,)


def _zip(f_mu, f_pi, y):
    mu = np.exp(f_mu)
    pi = expit(f_pi)
    log_pi = _log_sigmoid(f_pi)
    log_1m_pi = _log_sigmoid(-f_pi)
    zero = y == 0
    log_pois_zero = log_pi - mu
    log_p0 = np.logaddexp(log_1m_pi, log_pois_zero)
    # posterior weight of the Poisson component at y = 0
    w = np.exp(log_pois_zero - log_p0)
    pos_loss = -(log_pi - mu + y * f_mu - gammaln(y + 1.0))
    loss = np.where(zero, -log_p0, pos_loss)
    g_mu = np.where(zero, w * mu, mu - y)
    g_pi = np.where(zero, pi - w, pi - 1.0)
    return loss, (g_mu, g_pi)


def _nb(f_mu, f_phi, y):
    mu = np.exp(f_mu)
    phi = np.exp(f_phi)
    log_mp = np.logaddexp(f_mu, f_phi)  # log(mu + phi)
    loss = -(gammaln(y + phi) - gammaln(phi) - gammaln(y + 1.0)
             + y * (f_mu - log_mp) + phi * (f_phi - log_mp))
    q = np.exp(f_mu - log_mp)  # mu / (mu + phi)
    g_mu = phi * (mu - y) / (mu + phi)
    g_phi = -(phi * (digamma(y + phi) - digamma(phi) + (f_phi - log_mp) + q) - y * (1.0 - q))
    return loss, (g_mu, g_phi)


@dataclass(frozen=True)
class Objective:
    """A named loss: number of heads, which heads go through ``exp``, and
    whether responses must be counts."""

    name: str
    heads: int
    exp_heads: tuple
    counts: bool
    head_names: tuple
    _fn: object

    def per_sample(self, f: np.ndarray, y: np.ndarray, clamp: float | None = None):
        """Loss ``(n,)`` and head gradients ``(n, k)`` for heads ``f (n, k)``.

        With ``clamp`` set, every head of a count loss is evaluated at
        ``clip(f, -clamp, clamp)`` and the gradient is the derivative there.
        """
        f = np.asarray(f, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.heads:
            raise ValueError(f"{self.name} expects {self.heads} head(s), got predictions of shape {f.shape}")
        for h in self.exp_heads:
            _guard(f"{self.name} {self.head_names[h]}", f[:, h])
        if clamp is not None and self.counts:
            f = np.clip(f, -clamp, clamp)
        loss, grads = self._fn(*(f[:, h] for h in range(self.heads)), y)
        return loss, np.stack(grads, axis=1)

    def check_responses(self, y: np.ndarray) -> None:
        if self.name == "logistic" and np.any((y != 0) & (y != 1)):
            raise ValueError("logistic responses must be 0 or 1")
        if self.counts and np.any((y < 0) | (y != np.floor(y))):
            raise ValueError(f"{self.name} responses must be non-negative integers")


OBJECTIVES = {
    "mse": Objective("mse", 1, (), False, ("f",), _sq),
    "logistic": Objective("logistic", 1, (), False, ("f",), _logistic),
    "poisson": Objective("poisson", 1, (0,), True, ("f_mu",), _poisson),
    "zip": Objective("zip", 2, (0,), True, ("f_mu", "f_pi"), _zip),
    "nb": Objective("nb", 2, (0, 1), True, ("f_mu", "f_phi"), _nb),
}
ALIASES = {"squared_error": "mse", "negative_binomial": "nb"}


def get_objective(name: str) -> Objective:
    name = ALIASES.get(name, name)
    if name not in OBJECTIVES:
        raise ValueError(f"unknown loss {name!r}; choose from {', '.join(OBJECTIVES)}")
    return OBJECTIVES[name]


def _scalar(loss, grads):
    if np.ndim(loss) == 0:
        return (float(loss),) + tuple(float(g) for g in grads)
    return (loss,) + tuple(grads)


def squared_error(f, y):
    f, y = np.asarray(f, float), np.asarray(y, float)
    return _scalar(*_sq(f, y))


def logistic(f, y):
    f, y = np.asarray(f, float), np.asarray(y, float)
    return _scalar(*_logistic(f, y))


def poisson_nll(f, y):
    """``exp(f) - y f`` and its derivative ``exp(f) - y``. log y! is dropped."""
    f, y = np.asarray(f, float), np.asarray(y, float)
    _guard("poisson f", f)
    return _scalar(*_poisson(f, y))


def zip_nll(f_mu, f_pi, y):
    """Zero-inflated Poisson NLL with gradients ``(d/df_mu, d/df_pi)``."""
    f_mu, f_pi, y = (np.asarray(a, float) for a in (f_mu, f_pi, y))
    _guard("zip f_mu", f_mu)
    return _scalar(*_zip(f_mu, f_pi, y))


def nb_nll(f_mu, f_phi, y):
    """Negative binomial NLL with gradients ``(d/df_mu, d/df_phi)``."""
    f_mu, f_phi, y = (np.asarray(a, float) for a in (f_mu, f_phi, y))
    _guard("nb f_mu", f_mu)
    _guard("nb f_phi", f_phi)
    return _scalar(*_nb(f_mu, f_phi, y))


def zip_pmf(y, mu, pi):
    y = np.asarray(y, float)
    pois = np.exp(y * np.log(mu) - mu - gammaln(y + 1.0))
    return np.where(y == 0, (1.0 - pi) + pi * np.exp(-mu), pi * pois)


def nb_pmf(y, mu, phi):
    y = np.asarray(y, float)
    logp = (gammaln(y + phi) - gammaln(phi) - gammaln(y + 1.0)
            + y * np.log(mu / (mu + phi)) + phi * np.log(phi / (mu + phi)))
    return np.exp(logp)


REDUCTIONS = ("mean", "task_mean", "sum")


def batch_objective(obj: Objective, predictions, y, mask, reduction: str = "mean",
                    clamp: float | None = HEAD_CLAMP):
    """Masked loss over a (B, T, k) batch and its gradient w.r.t. predictions.

    ``mean`` divides the summed loss by the number of observed cells;
    ``task_mean`` averages within each task and sums over tasks, so tasks do
    not share a normalizer; ``sum`` does not normalize. Unobserved cells get
    zero gradient. Tasks without observations contribute nothing.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    B, T, k = pred.shape
    if y.shape != (B, T) or mask.shape != (B, T):
        raise ValueError(f"responses {y.shape} and mask {mask.shape} must be {(B, T)}")
    if k != obj.heads:
        raise ValueError(f"{obj.name} needs {obj.heads} head(s) per task, predictions have {k}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")

    grads = np.zeros_like(pred)
    rows, tasks = np.nonzero(mask)
    if rows.size == 0:
        return 0.0, grads
    yo = y[rows, tasks]
    obj.check_responses(yo)
    loss, g = obj.per_sample(pred[rows, tasks], yo, clamp=clamp)

    if reduction == "mean":
        scale = np.full(rows.size, 1.0 / rows.size)
    elif reduction == "task_mean":
        counts = mask.sum(axis=0)
        scale = 1.0 / counts[tasks]
    else:
        scale = np.ones(rows.size)
    grads[rows, tasks] = g * scale[:, None]
    if reduction == "task_mean":
        total = 0.0
        for t in range(T):
            sel = tasks == t
            if sel.any():
                total += float(np.sum(loss[sel])) / int(sel.sum())
        return total, grads
    return float(np.sum(loss)) / (rows.size if reduction == "mean" else 1), grads


def closeness_penalty(split_weights: np.ndarray, lam: float, depth_decay: bool = False):
    """``sum_i lam_i sum_{s<t} ||W_i[s] - W_i[t]||_F^2`` and its gradient.

    ``split_weights`` is (I, T, p, m); ``lam_i = lam / 2**depth(i)`` when
    ``depth_decay`` is set.
    """
    if not lam >= 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    W = np.asarray(split_weights, dtype=np.float64)
    I, T = W.shape[:2]
    grad = np.zeros_like(W)
    if T == 1 or lam == 0:
        return 0.0, grad
    depth = np.array([node_depth(i) for i in range(I)])
    lam_i = lam / 2.0 ** depth if depth_decay else np.full(I, float(lam))
    total = 0.0
    for i in range(I):
        Wi = W[i]
        node = 0.0
        for s in range(T):
            for t in range(s + 1, T):
                d = Wi[s] - Wi[t]
                node += float(np.sum(d * d))
        total += lam_i[i] * node
        grad[i] = 2.0 * lam_i[i] * (T * Wi - Wi.sum(axis=0))
    return float(total), grad
