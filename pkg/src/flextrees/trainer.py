"""Mini-batch Adam training with early stopping, plus a random-search tuner.

Gradients of a batch are computed over fixed-size row chunks and added up in
chunk order. Chunks may run on worker threads; since chunk boundaries and the
reduction order never depend on the worker count, any number of threads
gives bit-identical results.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataio import Dataset
from .ensemble import EnsembleParams
from .model import Model
from .objectives import batch_objective, closeness_penalty, get_objective
from .rng import stream

CHUNK_ROWS = 64
THREADS_ENV = "FLEXTREES_THREADS"


class NonFiniteGradientError(FloatingPointError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be at least 1, got {n}")
    return n


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 1e-2
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 25
    lam: float = 0.0
    depth_decay: bool = False
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reduction: str = "task_mean"
    keep_best: bool = True
    threads: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be at least 1")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_valid_loss: float = math.inf
    stopped_early: bool = False
    epochs_run: int = 0

    def summary(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "best_valid_loss": self.best_valid_loss,
            "stopped_early": self.stopped_early,
            "final_train_loss": self.train_loss[-1] if self.train_loss else math.nan,
        }


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros(cls, members: list) -> "AdamState":
        m = [[np.zeros_like(a) for _, a in p.blocks()] for p in members]
        v = [[np.zeros_like(a) for _, a in p.blocks()] for p in members]
        return cls(0, m, v)


def adam_step(state: AdamState, members: list, grads: list, spec: TrainSpec):
    """One bias-corrected Adam update; returns new ``(state, members)``."""
    for j, g in enumerate(grads):
        for name, arr in g.blocks():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteGradientError(f"non-finite gradient in member {j} block {name!r}")
    t = state.step + 1
    b1, b2 = spec.beta1, spec.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_members = [], [], []
    for j, (params, g) in enumerate(zip(members, grads)):
        ms, vs, blocks = [], [], []
        for n, ((_, p), (_, d)) in enumerate(zip(params.blocks(), g.blocks())):
            m = b1 * state.m[j][n] + (1.0 - b1) * d
            v = b2 * state.v[j][n] + (1.0 - b2) * (d * d)
            blocks.append(p - spec.learning_rate * (m / c1) / (np.sqrt(v / c2) + spec.eps))
            ms.append(m)
            vs.append(v)
        new_m.append(ms)
        new_v.append(vs)
        new_members.append(EnsembleParams(*blocks))
    return AdamState(t, new_m, new_v), new_members


def _chunks(n: int) -> list:
    return [slice(s, min(n, s + CHUNK_ROWS)) for s in range(0, n, CHUNK_ROWS)]


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def predict_raw(model: Model, X: np.ndarray, threads: int = 1) -> np.ndarray:
    parts = _map(lambda sl: model.raw(X[sl]), _chunks(X.shape[0]), threads)
    if not parts:
        return np.zeros((0, model.num_tasks, model.heads))
    return np.concatenate(parts, axis=0)


def data_loss(model: Model, data: Dataset, reduction: str = "task_mean", threads: int = 1) -> float:
    pred = predict_raw(model, data.features, threads)
    return batch_objective(get_objective(model.objective), pred, data.responses, data.mask, reduction)[0]


def batch_gradients(model: Model, X, Y, M, reduction: str, threads: int = 1):
    """Data loss and per-member gradients for one mini-batch."""
    chunks = _chunks(X.shape[0])
    fwd = _map(lambda sl: model.forward(X[sl]), chunks, threads)
    pred = np.concatenate([f[0] for f in fwd], axis=0)
    loss, g = batch_objective(get_objective(model.objective), pred, Y, M, reduction)
    parts = _map(lambda it: model.backward(it[1][1], X[it[0]], g[it[0]]), list(zip(chunks, fwd)), threads)
    total = parts[0]
    for part in parts[1:]:
        for acc, add in zip(total, part):
            acc.split_weights += add.split_weights
            acc.leaf_weights += add.leaf_weights
    return loss, total


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    order = stream(seed, "shuffle", epoch).permutation(n)
    if batch_size >= n:
        return [order]
    count = n // batch_size  # incomplete tail batch is dropped
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(count)]


def fit(model: Model, spec: TrainSpec, train: Dataset, valid: Dataset) -> tuple:
    """Train from ``model``'s current parameters; returns ``(model, report)``.

    The returned model holds the best-validation parameters (the last ones if
    ``spec.keep_best`` is off). Validation loss is the data term alone.
    """
    if valid.num_rows == 0:
        raise ValueError("validation split is empty")
    if spec.batch_size > train.num_rows:
        raise ValueError(f"batch_size {spec.batch_size} exceeds training rows {train.num_rows}")
    if train.num_tasks != model.num_tasks or valid.num_tasks != model.num_tasks:
        raise ValueError("dataset task count does not match the model")
    threads = spec.threads or default_threads()
    penalize = spec.lam > 0 and model.num_tasks > 1 and not model.config.share_splits

    members = [p.copy() for p in model.members]
    state = AdamState.zeros(members)
    report = TrainReport()
    best = [p.copy() for p in members]
    wait = 0
    X, Y, M = train.features, train.responses, train.mask
    for epoch in range(spec.max_epochs):
        losses = []
        for idx in _batches(train.num_rows, spec.batch_size, spec.seed, epoch):
            current = replace(model, members=members)
            loss, grads = batch_gradients(current, X[idx], Y[idx], M[idx], spec.reduction, threads)
            if penalize:
                for p, g in zip(members, grads):
                    _, pg = closeness_penalty(p.split_weights, spec.lam, spec.depth_decay)
                    g.split_weights += pg
            state, members = adam_step(state, members, grads, spec)
            losses.append(loss)
        report.train_loss.append(float(np.mean(losses)))
        vloss = data_loss(replace(model, members=members), valid, spec.reduction, threads)
        report.valid_loss.append(vloss)
        report.epochs_run = epoch + 1
        if not math.isfinite(vloss):
            raise DivergenceError(f"validation loss became {vloss} at epoch {epoch}", report)
        if vloss < report.best_valid_loss:
            report.best_valid_loss = vloss
            report.best_epoch = epoch
            best = [p.copy() for p in members]
            wait = 0
        else:
            wait += 1
            if wait >= spec.patience:
                report.stopped_early = True
                break
    final = best if spec.keep_best else members
    out = replace(model, members=final, summary=report.summary())
    return out, report


@dataclass(frozen=True)
class SearchSpace:
    depth: tuple = (2, 4)
    trees: tuple = (5, 100)
    batch_sizes: tuple = (64, 128, 256, 512)
    learning_rate: tuple = (1e-5, 1e-2)
    lam: tuple = (1e-5, 10.0)
    epochs: tuple = (20, 500)

    def sample(self, rng: np.random.Generator) -> dict:
        def log_uniform(lo, hi):
            return float(math.exp(rng.uniform(math.log(lo), math.log(hi)))) if hi > lo else float(lo)

        return {
            "depth": int(rng.integers(self.depth[0], self.depth[1] + 1)),
            "trees": int(rng.integers(self.trees[0], self.trees[1] + 1)),
            "batch_size": int(self.batch_sizes[rng.integers(len(self.batch_sizes))]),
            "learning_rate": log_uniform(*self.learning_rate),
            "lam": log_uniform(*self.lam),
            "epochs": int(rng.integers(self.epochs[0], self.epochs[1] + 1)),
        }


@dataclass
class Trial:
    index: int
    params: dict
    valid_loss: float
    epochs_run: int = 0
    error: str = ""


@dataclass
class SearchResult:
    best: Trial
    model: Model
    report: TrainReport
    trials: list


def random_search(space: SearchSpace, budget: int, seed: int, train: Dataset, valid: Dataset,
                  objective: str, base: TrainSpec | None = None, **model_kw) -> SearchResult:
    """Sample ``budget`` configurations i.i.d. from ``space`` and keep the one
    with the lowest validation loss (first wins ties)."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    base = base or TrainSpec(seed=seed)
    rng = stream(seed, "search")
    trials, best = [], None
    for i in range(budget):
        hp = space.sample(rng)
        hp["batch_size"] = min(hp["batch_size"], train.num_rows)
        spec = replace(base, learning_rate=hp["learning_rate"], batch_size=hp["batch_size"],
                       max_epochs=hp["epochs"], patience=min(base.patience, hp["epochs"]), lam=hp["lam"])
        model = Model.create(objective, train.num_features, train.num_tasks, hp["trees"], hp["depth"],
                             seed=spec.seed, stats=train.stats, feature_names=train.feature_names,
                             task_names=train.task_names, **model_kw)
        try:
            fitted, report = fit(model, spec, train, valid)
            trial = Trial(i, hp, report.best_valid_loss, report.epochs_run)
        except (DivergenceError, NonFiniteGradientError, OverflowError, FloatingPointError) as err:
            fitted, report = None, getattr(err, "report", None)
            trial = Trial(i, hp, math.inf, error=str(err))
        trials.append(trial)
        if fitted is not None and (best is None or trial.valid_loss < best[0].valid_loss):
            best = (trial, fitted, report)
    if best is None:
        raise DivergenceError("every trial diverged")
    return SearchResult(best[0], best[1], best[2], trials)


def spec_dict(spec: TrainSpec) -> dict:
    return asdict(spec)
