"""Model files: a JSON document with sorted keys.

Floats are written with Python's shortest round-trip repr, so loading gives
back the exact 64-bit values and saving the same model twice gives the same
bytes. Arrays are stored as ``{"shape": [...], "data": [flat row-major]}``.
Non-finite numbers (only possible in the training summary) are written as
the strings ``"nan"``, ``"inf"`` and ``"-inf"``.
"""

from __future__ import annotations

import fcntl
import json
import math
import os

import numpy as np

from .dataio import Stats
from .ensemble import EnsembleConfig, EnsembleParams
from .model import Model

FORMAT_VERSION = 1
FORMAT_NAME = "flextrees-model"


class ModelFileError(ValueError):
    pass


class FormatVersionError(ModelFileError):
    pass


def _array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _unarray(d, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        data = np.asarray(d["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFileError(f"{name}: malformed array ({err})") from None
    if data.size != math.prod(shape):
        raise ModelFileError(f"{name}: {data.size} values for shape {shape}")
    if not np.all(np.isfinite(data)):
        raise ModelFileError(f"{name}: non-finite values")
    return data.reshape(shape)


def _plain(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return _plain(v.item())
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def to_document(model: Model) -> dict:
    cfg = model.config
    return {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "objective": model.objective,
        "shared_heads": bool(model.shared_heads),
        "config": {
            "num_trees": cfg.num_trees,
            "depth": cfg.depth,
            "num_features": cfg.num_features,
            "num_heads": cfg.num_heads,
            "num_tasks": cfg.num_tasks,
            "gamma": float(cfg.gamma),
            "activation": cfg.activation,
            "share_splits": bool(cfg.share_splits),
        },
        "feature_names": list(model.feature_names),
        "task_names": list(model.task_names),
        "stats": None if model.stats is None else model.stats.to_dict(),
        "members": [{"split_weights": _array(p.split_weights), "leaf_weights": _array(p.leaf_weights)}
                    for p in model.members],
        "train_report": _plain(model.summary or {}),
    }


def dumps(model: Model) -> str:
    return json.dumps(to_document(model), sort_keys=True, indent=1, allow_nan=False) + "\n"


def from_document(doc) -> Model:
    if not isinstance(doc, dict):
        raise ModelFileError("model file must contain a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported format_version {version!r}; this build reads {FORMAT_VERSION}")
    try:
        c = doc["config"]
        cfg = EnsembleConfig(int(c["num_trees"]), int(c["depth"]), int(c["num_features"]), int(c["num_heads"]),
                             int(c["num_tasks"]), float(c["gamma"]), str(c["activation"]), bool(c["share_splits"]))
        members = [EnsembleParams(_unarray(m["split_weights"], "split_weights"),
                                  _unarray(m["leaf_weights"], "leaf_weights")) for m in doc["members"]]
        stats = None if doc.get("stats") is None else Stats.from_dict(doc["stats"])
        model = Model(str(doc["objective"]), cfg, members, bool(doc["shared_heads"]), stats,
                      dict(doc.get("train_report") or {}), list(doc["feature_names"]), list(doc["task_names"]))
    except KeyError as err:
        raise ModelFileError(f"missing field {err}") from None
    except (TypeError, ValueError) as err:
        if isinstance(err, ModelFileError):
            raise
        raise ModelFileError(f"invalid model file: {err}") from None
    try:
        model.validate()
    except ValueError as err:
        raise ModelFileError(str(err)) from None
    return model


def loads(text: str) -> Model:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        offset = len(text[:err.pos].encode("utf-8"))
        raise ModelFileError(f"parse error at byte {offset}: {err.msg}") from None
    return from_document(doc)


def save(model: Model, path) -> None:
    """Write ``model`` to ``path`` under an exclusive lock."""
    model.validate()
    data = dumps(model).encode("utf-8")
    try:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT, 0o644)
        with os.fdopen(fd, "wb") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            fh.truncate(0)
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as err:
        raise OSError(f"cannot write model file {path}: {err.strerror or err}") from err


def load(path) -> Model:
    try:
        with open(path, "rb") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            raw = fh.read()
    except OSError as err:
        raise OSError(f"cannot read model file {path}: {err.strerror or err}") from err
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as err:
        raise ModelFileError(f"parse error at byte {err.start}: invalid UTF-8") from None
    return loads(text)
