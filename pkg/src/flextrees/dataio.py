"""CSV ingestion, train/valid/test splitting and standardization.

Missing responses become mask-false cells (stored as NaN); missing feature
values are an error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import stream

MISSING = ("", "nan", "NaN", "NAN")
SPLITS = ("train", "valid", "test")
TRAIN_FRACTION = 0.64
VALID_FRACTION = 0.16


class DataError(ValueError):
    pass


@dataclass
class Stats:
    """Train-split statistics. ``response_min``/``response_range`` are set only
    when responses were min-max scaled."""

    feature_mean: np.ndarray
    feature_sd: np.ndarray
    response_min: np.ndarray | None = None
    response_range: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {"feature_mean": self.feature_mean.tolist(), "feature_sd": self.feature_sd.tolist()}
        if self.response_min is not None:
            out["response_min"] = self.response_min.tolist()
            out["response_range"] = self.response_range.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Stats":
        arr = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=np.float64)
        return cls(arr("feature_mean"), arr("feature_sd"), arr("response_min"), arr("response_range"))

    def transform_features(self, X: np.ndarray) -> np.ndarray:
        if X.shape[1] != self.feature_mean.shape[0]:
            raise DataError(f"expected {self.feature_mean.shape[0]} features, got {X.shape[1]}")
        return (X - self.feature_mean) / self.feature_sd

    def transform_responses(self, Y: np.ndarray) -> np.ndarray:
        if self.response_min is None:
            return Y
        return (Y - self.response_min) / self.response_range

    def inverse_responses(self, Y: np.ndarray) -> np.ndarray:
        if self.response_min is None:
            return Y
        return Y * self.response_range + self.response_min


@dataclass
class Dataset:
    features: np.ndarray
    responses: np.ndarray
    mask: np.ndarray
    feature_names: list = field(default_factory=list)
    task_names: list = field(default_factory=list)
    stats: Stats | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.responses = np.asarray(self.responses, dtype=np.float64)
        if self.responses.ndim == 1:
            self.responses = self.responses[:, None]
        if self.mask is None:
            self.mask = ~np.isnan(self.responses)
        self.mask = np.asarray(self.mask, dtype=bool)
        N = self.features.shape[0]
        if self.responses.shape[0] != N or self.mask.shape != self.responses.shape:
            raise DataError(f"features {self.features.shape}, responses {self.responses.shape} "
                            f"and mask {self.mask.shape} disagree")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.num_features)]
        if not self.task_names:
            self.task_names = [f"y{t}" for t in range(self.num_tasks)]

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_tasks(self) -> int:
        return self.responses.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(self, features=self.features[rows], responses=self.responses[rows], mask=self.mask[rows])


def _number(cell: str, row: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: {cell!r} is not a number") from None


def load_csv(path, task_columns, delimiter: str = ",") -> Dataset:
    """Read a headed CSV; ``task_columns`` are responses, the rest features."""
    if isinstance(task_columns, str):
        task_columns = [c for c in task_columns.split(",") if c]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        unknown = [c for c in task_columns if c not in header]
        if unknown:
            raise DataError(f"{path}: unknown task column(s) {unknown}; header is {header}")
        t_idx = [header.index(c) for c in task_columns]
        f_idx = [j for j, h in enumerate(header) if h not in task_columns]
        X, Y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
            feats = []
            for j in f_idx:
                cell = row[j].strip()
                if cell in MISSING:
                    raise DataError(f"{path}: row {lineno}, column {header[j]!r}: missing feature value")
                feats.append(_number(cell, lineno, header[j]))
            resp = []
            for j in t_idx:
                cell = row[j].strip()
                resp.append(np.nan if cell in MISSING else _number(cell, lineno, header[j]))
            X.append(feats)
            Y.append(resp)
    features = np.asarray(X, dtype=np.float64).reshape(len(X), len(f_idx))
    responses = np.asarray(Y, dtype=np.float64).reshape(len(Y), len(t_idx))
    return Dataset(features, responses, ~np.isnan(responses),
                   [header[j] for j in f_idx], list(task_columns))


def write_csv(dataset: Dataset, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(list(dataset.feature_names) + list(dataset.task_names))
        for b in range(dataset.num_rows):
            feats = [repr(float(v)) for v in dataset.features[b]]
            resp = [repr(float(v)) if m else "" for v, m in zip(dataset.responses[b], dataset.mask[b])]
            w.writerow(feats + resp)


@dataclass
class SplitAssignment:
    labels: np.ndarray  # one of SPLITS per row
    seed: int

    def rows(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return np.flatnonzero(self.labels == name)

    def counts(self) -> dict:
        return {s: int(np.sum(self.labels == s)) for s in SPLITS}


def split_sizes(n: int) -> tuple:
    n_train = int(np.floor(TRAIN_FRACTION * n + 0.5))
    n_valid = int(np.floor(VALID_FRACTION * n + 0.5))
    return n_train, n_valid, n - n_train - n_valid


def split(dataset: Dataset | int, seed: int) -> SplitAssignment:
    """Seeded shuffle, then contiguous 64/16/20 blocks."""
    n = dataset if isinstance(dataset, (int, np.integer)) else dataset.num_rows
    if n < 5:
        raise DataError(f"need at least 5 rows to split, got {n}")
    n_train, n_valid, _ = split_sizes(n)
    order = stream(seed, "split").permutation(n)
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_valid]] = "valid"
    labels[order[n_train + n_valid:]] = "test"
    return SplitAssignment(labels.astype(str), int(seed))


def fit_stats(dataset: Dataset, rows=None, scale_responses: bool = False) -> Stats:
    X = dataset.features if rows is None else dataset.features[rows]
    if X.shape[0] == 0:
        raise DataError("cannot compute standardization statistics from an empty split")
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    const = X.max(axis=0) == X.min(axis=0)
    mean[const] = X[0, const]
    sd[const] = 1.0
    stats = Stats(mean, sd)
    if scale_responses:
        Y = dataset.responses if rows is None else dataset.responses[rows]
        M = dataset.mask if rows is None else dataset.mask[rows]
        lo = np.array([Y[M[:, t], t].min() if M[:, t].any() else 0.0 for t in range(Y.shape[1])])
        hi = np.array([Y[M[:, t], t].max() if M[:, t].any() else 1.0 for t in range(Y.shape[1])])
        rng = hi - lo
        rng[~(rng > 0)] = 1.0
        stats.response_min, stats.response_range = lo, rng
    return stats


def apply_stats(dataset: Dataset, stats: Stats) -> Dataset:
    Y = stats.transform_responses(dataset.responses)
    return replace(dataset, features=stats.transform_features(dataset.features), responses=Y, stats=stats)


def standardize(dataset: Dataset, assignment: SplitAssignment | None = None,
                scale_responses: bool = False) -> Dataset:
    """Standardize features with train-split mean/sd (whole set if no split).

    Constant columns keep sd 1 and end up all zero. ``scale_responses``
    min-max scales each task to [0, 1] on the train split; meant for
    squared-error tasks.
    """
    rows = None if assignment is None else assignment.rows("train")
    return apply_stats(dataset, fit_stats(dataset, rows, scale_responses))
