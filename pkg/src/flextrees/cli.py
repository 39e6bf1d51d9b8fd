"""Command-line front end.

Reports go to stdout as ``key: value`` lines grouped under ``[section]``
headers. Wall-clock numbers only ever appear in the ``[timing]`` section, so
everything else is reproducible byte for byte. Exit status is 0 on success,
1 for usage errors and 2 for failures while running.
"""

from __future__ import annotations

import argparse
import math
import sys
import time

import numpy as np

from . import dataio, metrics, store
from .model import Model, transform_heads
from .objectives import OBJECTIVES, batch_objective, get_objective
from .oracle import GENERATORS, SyntheticSpec, benchmark, generate
from .trainer import THREADS_ENV, SearchSpace, TrainSpec, default_threads, fit, predict_raw, random_search

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text!r} must be at least 1")
    return v


def _float(lo=None, strict=False):
    def parse(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
        if not math.isfinite(v) or (lo is not None and (v <= lo if strict else v < lo)):
            raise argparse.ArgumentTypeError(f"{text!r} must be {'>' if strict else '>='} {lo}")
        return v
    return parse


def _range(kind):
    def parse(text):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"{text!r} must look like LO,HI")
        try:
            lo, hi = (kind(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{text!r} must look like LO,HI") from None
        if not lo <= hi or lo <= 0:
            raise argparse.ArgumentTypeError(f"{text!r} needs 0 < LO <= HI")
        return lo, hi
    return parse


def _int_list(text):
    try:
        vals = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} must be a comma-separated list of integers") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"{text!r} must list positive integers")
    return vals


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def emit(section: str, items, out=None) -> None:
    out = out or sys.stdout
    print(f"[{section}]", file=out)
    for key, value in items:
        print(f"{key}: {_fmt(value)}", file=out)
    print(file=out)


def _add_model_flags(p):
    p.add_argument("--data", required=True, help="CSV with a header row")
    p.add_argument("--tasks", required=True, help="comma-separated response columns")
    p.add_argument("--loss", required=True, choices=sorted(OBJECTIVES))
    p.add_argument("--delimiter", default=",")
    p.add_argument("--gamma", type=_float(0.0, strict=True), default=1.0)
    p.add_argument("--activation", choices=("smoothstep", "logistic"), default="smoothstep")
    p.add_argument("--share-splits", action="store_true", help="one set of hyperplanes for all tasks")
    p.add_argument("--separate-heads", action="store_true",
                   help="two-head losses: one ensemble per head instead of shared routing")
    p.add_argument("--scale-responses", action="store_true", help="mse only: min-max scale responses")
    p.add_argument("--patience", type=_positive_int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model file to write")


def build_parser() -> Parser:
    parser = Parser(prog="flextrees", description="Soft tree ensembles with flexible likelihoods.")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help=f"worker threads (default ${THREADS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="fit one model")
    _add_model_flags(p)
    p.add_argument("--trees", type=_positive_int, default=10)
    p.add_argument("--depth", type=_positive_int, default=3)
    p.add_argument("--lr", type=_float(0.0, strict=True), default=1e-2)
    p.add_argument("--batch", type=_positive_int, default=64)
    p.add_argument("--epochs", type=_positive_int, default=100)
    p.add_argument("--lambda", dest="lam", type=_float(0.0), default=0.0)
    p.add_argument("--depth-decay", action="store_true")

    p = sub.add_parser("tune", help="random search over hyperparameters")
    _add_model_flags(p)
    p.add_argument("--budget", type=_positive_int, required=True)
    p.add_argument("--depth-range", type=_range(int), default=(2, 4))
    p.add_argument("--trees-range", type=_range(int), default=(5, 100))
    p.add_argument("--batch-sizes", type=_int_list, default=(64, 128, 256, 512))
    p.add_argument("--lr-range", type=_range(float), default=(1e-5, 1e-2))
    p.add_argument("--lambda-range", type=_range(float), default=(1e-5, 10.0))
    p.add_argument("--epoch-range", type=_range(int), default=(20, 500))
    p.add_argument("--depth-decay", action="store_true")

    p = sub.add_parser("predict", help="write per-row predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delimiter", default=",")

    p = sub.add_parser("evaluate", help="loss and metrics of a model on a data file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--split", choices=("all",) + dataio.SPLITS, default="all",
                   help="restrict to one split, reproduced from --seed")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--kind", required=True, choices=GENERATORS)
    p.add_argument("--n", type=_positive_int, default=1000)
    p.add_argument("--p", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pi", type=_float(0.0), default=0.7)
    p.add_argument("--mu", type=_float(0.0, strict=True), default=2.0)
    p.add_argument("--mu-max", type=_float(0.0, strict=True), default=math.inf)
    p.add_argument("--pi-effect", type=float, default=0.0)
    p.add_argument("--mu-effect", type=float, default=0.0)
    p.add_argument("--phi", type=_float(0.0, strict=True), default=2.0)
    p.add_argument("--separation", type=_float(0.0), default=4.0)
    p.add_argument("--noise", type=_float(0.0), default=0.0)
    p.add_argument("--num-tasks", type=_positive_int, default=3)
    p.add_argument("--rho", type=_float(0.0), default=0.9)
    p.add_argument("--missing-rate", type=_float(0.0), default=0.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="time supernode against tree-by-tree evaluation")
    p.add_argument("--trees", type=_positive_int, default=100)
    p.add_argument("--depth", type=_positive_int, default=4)
    p.add_argument("--features", type=_positive_int, default=50)
    p.add_argument("--batch", type=_positive_int, default=256)
    p.add_argument("--repeats", type=_positive_int, default=15)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _prepare(args):
    data = dataio.load_csv(args.data, args.tasks, args.delimiter)
    if args.scale_responses and args.loss != "mse":
        raise UsageError("--scale-responses only applies to --loss mse")
    assignment = dataio.split(data, args.seed)
    data = dataio.standardize(data, assignment, scale_responses=args.scale_responses)
    train, valid = data.subset(assignment.rows("train")), data.subset(assignment.rows("valid"))
    return data, assignment, train, valid


def _model_kw(args) -> dict:
    return {"gamma": args.gamma, "activation": args.activation,
            "share_splits": args.share_splits, "shared_heads": not args.separate_heads}


def cmd_train(args, threads: int) -> int:
    data, assignment, train, valid = _prepare(args)
    if args.batch > train.num_rows:
        raise UsageError(f"--batch {args.batch} exceeds the {train.num_rows} training rows")
    if args.patience > args.epochs:
        raise UsageError("--patience must not exceed --epochs")
    spec = TrainSpec(learning_rate=args.lr, batch_size=args.batch, max_epochs=args.epochs,
                     patience=args.patience, lam=args.lam, depth_decay=args.depth_decay,
                     seed=args.seed, threads=threads)
    model = Model.create(args.loss, data.num_features, data.num_tasks, args.trees, args.depth,
                         seed=args.seed, stats=data.stats, feature_names=data.feature_names,
                         task_names=data.task_names, **_model_kw(args))
    t0 = time.perf_counter()
    model, report = fit(model, spec, train, valid)
    elapsed = time.perf_counter() - t0
    train_loss = _loss(model, train, threads)
    store.save(model, args.out)
    emit("train", [("model", args.out), ("objective", model.objective), ("rows", data.num_rows),
                   ("split", [assignment.counts()[s] for s in dataio.SPLITS]),
                   ("trees", args.trees), ("depth", args.depth), ("lambda", args.lam)])
    emit("report", [("epochs_run", report.epochs_run), ("best_epoch", report.best_epoch),
                    ("best_valid_loss", report.best_valid_loss), ("stopped_early", report.stopped_early),
                    ("train_loss", train_loss)])
    emit("timing", [("fit_seconds", round(elapsed, 3))])
    return EXIT_OK


def _loss(model: Model, data: dataio.Dataset, threads: int) -> float:
    pred = predict_raw(model, data.features, threads)
    return batch_objective(get_objective(model.objective), pred, data.responses, data.mask, "task_mean")[0]


def cmd_tune(args, threads: int) -> int:
    data, _, train, valid = _prepare(args)
    space = SearchSpace(args.depth_range, args.trees_range, args.batch_sizes, args.lr_range,
                        args.lambda_range, args.epoch_range)
    base = TrainSpec(seed=args.seed, patience=args.patience, depth_decay=args.depth_decay, threads=threads)
    t0 = time.perf_counter()
    result = random_search(space, args.budget, args.seed, train, valid, args.loss, base, **_model_kw(args))
    elapsed = time.perf_counter() - t0
    store.save(result.model, args.out)
    for trial in result.trials:
        emit(f"trial {trial.index}", list(trial.params.items()) +
             [("valid_loss", trial.valid_loss), ("epochs_run", trial.epochs_run)] +
             ([("error", trial.error)] if trial.error else []))
    emit("best", [("trial", result.best.index)] + list(result.best.params.items()) +
         [("valid_loss", result.best.valid_loss), ("model", args.out)])
    emit("timing", [("tune_seconds", round(elapsed, 3))])
    return EXIT_OK


def _features_for(model: Model, path, delimiter) -> dataio.Dataset:
    with open(path, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().rstrip("\n").split(delimiter)]
    missing = [f for f in model.feature_names if f not in header]
    if missing:
        raise dataio.DataError(f"{path}: missing feature column(s) {missing}")
    others = [h for h in header if h not in model.feature_names]
    data = dataio.load_csv(path, others, delimiter)
    order = [data.feature_names.index(f) for f in model.feature_names]
    return dataio.Dataset(data.features[:, order], data.responses, data.mask,
                          list(model.feature_names), data.task_names)


def cmd_predict(args, threads: int) -> int:
    model = store.load(args.model)
    data = _features_for(model, args.data, args.delimiter)
    X = data.features if model.stats is None else model.stats.transform_features(data.features)
    outs = transform_heads(model.objective, predict_raw(model, X, threads), model.stats)
    names = [k for k in ("mean", "mu", "pi", "phi") if k in outs]
    with open(args.out, "w", encoding="utf-8") as fh:
        cols = ["row"] + [f"{t}.{n}" for t in model.task_names for n in names]
        fh.write(",".join(cols) + "\n")
        for b in range(data.num_rows):
            vals = [str(b)] + [repr(float(outs[n][b, t])) for t in range(model.num_tasks) for n in names]
            fh.write(",".join(vals) + "\n")
    emit("predict", [("model", args.model), ("rows", data.num_rows), ("out", args.out)])
    return EXIT_OK


def cmd_evaluate(args, threads: int) -> int:
    model = store.load(args.model)
    data = dataio.load_csv(args.data, model.task_names, args.delimiter)
    if data.feature_names != model.feature_names:
        order = [data.feature_names.index(f) for f in model.feature_names if f in data.feature_names]
        if len(order) != len(model.feature_names):
            raise dataio.DataError(f"{args.data}: feature columns do not match the model")
        data = dataio.Dataset(data.features[:, order], data.responses, data.mask,
                              list(model.feature_names), data.task_names)
    if args.split != "all":
        data = data.subset(dataio.split(data, args.seed).rows(args.split))
    scaled = data if model.stats is None else dataio.apply_stats(data, model.stats)
    raw = predict_raw(model, scaled.features, threads)
    loss = batch_objective(get_objective(model.objective), raw, scaled.responses, scaled.mask, "task_mean")[0]
    mean = transform_heads(model.objective, raw, model.stats)["mean"]
    report = metrics.evaluate(model.objective, mean, data.responses, data.mask, model.task_names)
    emit("evaluate", [("model", args.model), ("rows", data.num_rows), ("split", args.split), ("loss", loss)])
    emit("metrics", [tuple(line.split(": ", 1)) for line in report.lines()])
    return EXIT_OK


def cmd_gen(args, threads: int) -> int:
    if args.missing_rate >= 1.0 or args.pi > 1.0 or args.rho > 1.0:
        raise UsageError("--pi and --rho must be at most 1 and --missing-rate below 1")
    spec = SyntheticSpec(args.kind, args.n, args.p, args.seed, args.pi, args.mu, args.mu_max, args.pi_effect,
                         args.mu_effect, args.phi, args.separation, args.noise, args.num_tasks, args.rho,
                         args.missing_rate)
    data = generate(spec)
    dataio.write_csv(data, args.out)
    emit("gen", [("kind", args.kind), ("rows", data.num_rows), ("features", data.num_features),
                 ("tasks", ",".join(data.task_names)), ("out", args.out)])
    return EXIT_OK


def cmd_bench(args, threads: int) -> int:
    r = benchmark(args.trees, args.depth, args.features, args.batch, args.repeats, args.seed)
    emit("bench", [("trees", r.trees), ("depth", r.depth), ("features", r.features), ("batch", r.batch),
                   ("repeats", r.repeats), ("max_abs_diff", r.max_abs_diff)])
    emit("timing", [("supernode_ms", round(r.supernode_seconds * 1e3, 3)),
                    ("per_tree_ms", round(r.looped_seconds * 1e3, 3)),
                    ("speedup", round(r.speedup, 2))])
    return EXIT_OK


COMMANDS = {"train": cmd_train, "tune": cmd_tune, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "gen": cmd_gen, "bench": cmd_bench}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, parse errors exit 1
        return int(exc.code or 0)
    try:
        threads = args.threads or default_threads()
        return COMMANDS[args.command](args, threads)
    except UsageError as err:
        print(f"flextrees {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError, ArithmeticError, KeyError) as err:
        print(f"flextrees {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
