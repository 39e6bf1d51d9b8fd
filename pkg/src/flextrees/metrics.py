"""Evaluation metrics over observed (mask-true) entries.

A metric with nothing to measure returns ``UNDEFINED`` (NaN) rather than
raising, so a report can still be printed for the other tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

UNDEFINED = float("nan")


def _observed(pred, y, mask):
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(f"predictions {pred.shape} and responses {y.shape} differ in shape")
    if mask is None:
        return pred.ravel(), y.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != y.shape:
        raise ValueError(f"mask {mask.shape} does not match responses {y.shape}")
    return pred[mask], y[mask]


def mse(pred, y, mask=None) -> float:
    p, t = _observed(pred, y, mask)
    if p.size == 0:
        return UNDEFINED
    return float(np.mean((p - t) ** 2))


def poisson_deviance(mu, y, mask=None, weights=None) -> float:
    """Weighted mean of ``2 [y log(y/mu) - (y - mu)]``; unit weights by default."""
    m, t = _observed(mu, y, mask)
    if weights is None:
        w = np.ones_like(m)
    else:
        w, _ = _observed(np.broadcast_to(weights, np.shape(y)), y, mask)
    if np.any(m <= 0) or not np.all(np.isfinite(m)):
        raise ValueError("poisson_deviance needs finite positive means")
    if m.size == 0 or w.sum() == 0:
        return UNDEFINED
    ylog = np.zeros_like(t)
    pos = t > 0
    ylog[pos] = t[pos] * np.log(t[pos] / m[pos])
    dev = 2.0 * (ylog - (t - m))
    return float(np.sum(w * dev) / np.sum(w))


def auc(scores, labels, mask=None) -> float:
    """Mann-Whitney AUC; tied scores earn half credit."""
    s, lab = _observed(scores, labels, mask)
    pos = lab > 0.5
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(s)  # average ranks carry the tie credit
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricReport:
    task_names: list
    values: dict = field(default_factory=dict)  # metric name -> list per task
    observed: list = field(default_factory=list)

    def lines(self):
        out = []
        for t, name in enumerate(self.task_names):
            out.append(f"task.{name}.observed: {self.observed[t]}")
            for metric, vals in self.values.items():
                out.append(f"task.{name}.{metric}: {vals[t]!r}")
        return out


def evaluate(objective: str, mean, y, mask, task_names) -> MetricReport:
    """Per-task metrics suited to the loss: MSE for regression, deviance and
    zero-vs-nonzero AUC for counts, AUC for binary labels."""
    mean = np.asarray(mean, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    T = y.shape[1]
    report = MetricReport(list(task_names), observed=[int(mask[:, t].sum()) for t in range(T)])
    cols = [(mean[:, t], y[:, t], mask[:, t]) for t in range(T)]
    report.values["mse"] = [mse(m, v, k) for m, v, k in cols]
    if objective in ("poisson", "zip", "nb"):
        report.values["poisson_deviance"] = [poisson_deviance(m, v, k) for m, v, k in cols]
        report.values["auc_nonzero"] = [auc(m, (v > 0).astype(float), k) for m, v, k in cols]
    elif objective == "logistic":
        report.values["auc"] = [auc(m, v, k) for m, v, k in cols]
    return report
