"""A trained predictor: loss, ensemble(s) and input statistics.

Two-head losses either read both heads off one ensemble (``shared_heads``,
so both heads see the same routing) or use one single-head ensemble per
head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import ensemble as ens
from .dataio import Stats
from .objectives import HEAD_CLAMP, get_objective


@dataclass
class Model:
    objective: str
    config: ens.EnsembleConfig  # shared by every member
    members: list
    shared_heads: bool = True
    stats: Stats | None = None
    summary: dict = field(default_factory=dict)
    feature_names: list = field(default_factory=list)
    task_names: list = field(default_factory=list)

    @classmethod
    def create(cls, objective: str, num_features: int, num_tasks: int = 1, trees: int = 10, depth: int = 3,
               gamma: float = 1.0, activation: str = "smoothstep", share_splits: bool = False,
               shared_heads: bool = True, seed: int = 0, stats: Stats | None = None,
               feature_names=None, task_names=None) -> "Model":
        obj = get_objective(objective)
        per_member = obj.heads if shared_heads else 1
        cfg = ens.EnsembleConfig(trees, depth, num_features, per_member, num_tasks, gamma, activation, share_splits)
        n_members = obj.heads // per_member
        members = [ens.init_params(cfg, seed, member=j) for j in range(n_members)]
        return cls(obj.name, cfg, members, shared_heads or obj.heads == 1, stats, {},
                   list(feature_names or [f"x{j}" for j in range(num_features)]),
                   list(task_names or [f"y{t}" for t in range(num_tasks)]))

    @property
    def heads(self) -> int:
        return get_objective(self.objective).heads

    @property
    def num_tasks(self) -> int:
        return self.config.num_tasks

    def validate(self) -> None:
        obj = get_objective(self.objective)
        if self.config.num_heads * len(self.members) != obj.heads:
            raise ValueError(f"{obj.name} needs {obj.heads} heads; model has {len(self.members)} "
                             f"member(s) with {self.config.num_heads} head(s) each")
        for params in self.members:
            params.validate(self.config)
        if self.stats is not None and self.stats.feature_mean.shape != (self.config.num_features,):
            raise ValueError("standardization stats do not match the feature count")
        if len(self.feature_names) != self.config.num_features or len(self.task_names) != self.config.num_tasks:
            raise ValueError("feature/task names do not match the config")

    def forward(self, X, keep_trace: bool = True):
        """Raw heads ``(B, T, heads)`` and one trace per member."""
        outs, traces = [], []
        for params in self.members:
            pred, trace = ens.forward(self.config, params, X, keep_trace)
            outs.append(pred)
            traces.append(trace)
        return np.concatenate(outs, axis=2) if len(outs) > 1 else outs[0], traces

    def backward(self, traces, X, output_grads) -> list:
        k = self.config.num_heads
        return [ens.backward(self.config, params, trace, X, output_grads[:, :, j * k:(j + 1) * k])
                for j, (params, trace) in enumerate(zip(self.members, traces))]

    def raw(self, X) -> np.ndarray:
        return self.forward(X, keep_trace=False)[0]

    def outputs(self, features, standardized: bool = False) -> dict:
        """Named per-task outputs on the response scale, each (B, T).

        ``mean`` is always present; ZIP adds ``mu`` and ``pi``, NB adds ``mu``
        and ``phi``. Unless ``standardized``, features are first transformed
        with the stored statistics.
        """
        X = np.asarray(features, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if self.stats is not None and not standardized:
            X = self.stats.transform_features(X)
        return transform_heads(self.objective, self.raw(X), self.stats)

    def predict_mean(self, features, standardized: bool = False) -> np.ndarray:
        return self.outputs(features, standardized)["mean"]


def transform_heads(objective: str, f: np.ndarray, stats: Stats | None = None) -> dict:
    def exp_c(v):
        return np.exp(np.clip(v, -HEAD_CLAMP, HEAD_CLAMP))

    if objective == "mse":
        mean = f[..., 0] if stats is None else stats.inverse_responses(f[..., 0])
        return {"mean": mean}
    if objective == "logistic":
        return {"mean": expit(f[..., 0])}
    if objective == "poisson":
        return {"mean": exp_c(f[..., 0])}
    mu = exp_c(f[..., 0])
    if objective == "zip":
        pi = expit(f[..., 1])
        return {"mean": pi * mu, "mu": mu, "pi": pi}
    if objective == "nb":
        return {"mean": mu, "mu": mu, "phi": exp_c(f[..., 1])}
    raise ValueError(f"unknown objective {objective!r}")
