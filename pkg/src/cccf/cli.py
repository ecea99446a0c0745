"""Command-line driver: prepare, train, evaluate, retrieve, bench, experiment.

Settings come from a plain-text ``key = value`` file (``--config``) and
``--set key=value`` flags, flags winning. Failures print one line
``error: <category>: <message>`` to stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import modelfile
from .data import DataError, ParseError, RatingTriples, build_matrix, filter_min_interactions, load_ratings, split_per_user
from .evaluation import DEFAULT_KS, REPORT_COLUMNS, evaluate, make_splits, run_experiment, write_report
from .mf import MfConfig, MfDivergenceError, train_mf
from .retrieval import MODES, IndexOverflowError, benchmark, build_index, topk_exact, topk_fast, write_bench_csv
from .solver import OrthogonalUpdateError, TrainConfig, TrainingDivergedError, fit, write_history

log = logging.getLogger("cccf")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.category = category
        self.code = code


# -- run configuration -------------------------------------------------------

def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_ks(v: str) -> tuple[int, ...]:
    ks = tuple(int(x) for x in v.split(",") if x.strip())
    if not ks or min(ks) < 1:
        raise ValueError("ks must be a comma-separated list of positive integers")
    return ks


def _parse_grid(v: str) -> list[dict]:
    """``G=1,r=64,weighting=unit; G=8,r=8`` -> list of override dicts."""
    grid = []
    for point in v.split(";"):
        point = point.strip()
        if not point:
            continue
        entry = {}
        for pair in point.split(","):
            key, sep, raw = pair.partition("=")
            key = key.strip()
            if not sep or key not in _GRID_KEYS:
                raise ValueError(f"bad grid entry {pair.strip()!r}")
            entry[key] = _GRID_KEYS[key](raw.strip())
        grid.append(entry)
    return grid


_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_CASTS = {"int": int, "float": float, "str": str, "bool": _parse_bool}
_GRID_KEYS = {name: _CASTS[t] for name, t in _TRAIN_TYPES.items()} | {"e": int}


@dataclass
class RunConfig:
    """Every setting a subcommand may read; keys mirror TrainConfig and MfConfig."""

    train: TrainConfig = field(default_factory=TrainConfig)
    mf: MfConfig = field(default_factory=MfConfig)
    e: int = 100
    ks: tuple[int, ...] = DEFAULT_KS
    gain: str = "linear"
    candidates: str = "all"
    fast: bool = True
    threads: int = 0
    format: str = ""
    min_count: int = 1
    train_frac: float = 0.7
    split_seed: int = 0
    split_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    dataset: str = ""
    grid: list = field(default_factory=list)

    KEYS = ()  # filled below

    def set(self, key: str, raw: str) -> None:
        key = key.strip()
        raw = raw.strip()
        try:
            if key in _TRAIN_TYPES:
                self.train = replace(self.train, **{key: _CASTS[_TRAIN_TYPES[key]](raw)})
            elif key.startswith("mf_") and key[3:] in {f.name for f in fields(MfConfig)}:
                name = key[3:]
                cast = float if name in ("lam", "learning_rate") else int
                self.mf = replace(self.mf, **{name: cast(raw)})
            elif key in ("e", "threads", "min_count", "split_seed"):
                setattr(self, key, int(raw))
            elif key == "train_frac":
                self.train_frac = float(raw)
            elif key in ("gain", "candidates", "format", "dataset"):
                setattr(self, key, raw)
            elif key == "fast":
                self.fast = _parse_bool(raw)
            elif key == "ks":
                self.ks = _parse_ks(raw)
            elif key == "split_seeds":
                self.split_seeds = tuple(int(x) for x in raw.split(",") if x.strip())
            elif key == "grid":
                self.grid = _parse_grid(raw)
            else:
                raise CliError("config-error", f"unknown key {key!r}", EXIT_USAGE)
        except CliError:
            raise
        except (ValueError, TypeError) as exc:
            raise CliError("config-error", f"{key}: {exc}", EXIT_USAGE) from None

    def model_config(self) -> dict:
        cfg = self.train.as_dict()
        cfg.update({f"mf_{k}": v for k, v in vars(self.mf).items()}, e=self.e)
        return cfg


RunConfig.KEYS = tuple(sorted(set(_TRAIN_TYPES) | {f"mf_{f.name}" for f in fields(MfConfig)} | {
    "e", "ks", "gain", "candidates", "fast", "threads", "format", "min_count", "train_frac",
    "split_seed", "split_seeds", "dataset", "grid"}))


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError("config-error", f"line {line_no}: expected key = value", EXIT_USAGE)
        cfg.set(key, value)
    return cfg


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise CliError("io-error", f"{path}: {exc.strerror}") from None
        parse_config_text(text, cfg)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError("config-error", f"--set expects key=value, got {item!r}", EXIT_USAGE)
        cfg.set(key, value)
    return cfg


def apply_threads(cfg: RunConfig) -> None:
    threads = cfg.threads or int(os.environ.get("CCCF_THREADS", "0") or 0)
    if threads > 0:
        import numba
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


# -- subcommands -------------------------------------------------------------

def _load_triples(path: str, fmt: str = "") -> RatingTriples:
    try:
        return load_ratings(path, fmt or None)
    except OSError as exc:
        raise CliError("io-error", f"{path}: {exc.strerror}") from None


def _load_model(path: str):
    try:
        return modelfile.load(path)
    except OSError as exc:
        raise CliError("io-error", f"{path}: {exc.strerror}") from None


def cmd_prepare(args, cfg: RunConfig) -> int:
    triples = _load_triples(args.input, cfg.format)
    if cfg.min_count > 1:
        triples = filter_min_interactions(triples, cfg.min_count)
    train, test = split_per_user(triples, cfg.train_frac, cfg.split_seed)
    os.makedirs(args.out, exist_ok=True)
    for name, part in (("train.csv", train), ("test.csv", test)):
        with open(os.path.join(args.out, name), "w", encoding="utf-8", newline="") as fh:
            part.to_csv(fh)
    print(f"train={len(train)} test={len(test)}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    matrix = build_matrix(_load_triples(args.train, cfg.format))
    latents = train_mf(matrix, cfg.mf) if cfg.train.weighting == "kernel" else None
    result = fit(matrix, latents, cfg.train)
    model = result.model
    model.config = cfg.model_config()
    modelfile.save(model, args.out)
    log_path = args.log or args.out + ".log.csv"
    with open(log_path, "w", encoding="utf-8") as fh:
        write_history(result.history, fh)
    last = result.history[-1]
    print(f"iterations={last['iteration']} objective={last['objective']!r}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    model = _load_model(args.model)
    if model.user_ids is None or model.item_ids is None:
        raise CliError("model-format-error", "model file carries no id maps")
    test = _load_triples(args.test, cfg.format)
    index = build_index(model, cfg.e)
    report = evaluate(index, model.user_ids, model.item_ids, test, cfg.ks, cfg.fast, cfg.gain, cfg.candidates)
    mc = model.config
    row = dict(dataset=cfg.dataset, split_seed=cfg.split_seed, G=model.G, r=model.r, total_bits=model.G * model.r,
               h=model.weights.bandwidth, e=cfg.e, alpha1=mc.get("alpha1", ""), alpha2=mc.get("alpha2", ""),
               train_secs="", retrieval_secs=report.retrieval_secs)
    for k in cfg.ks:
        row[f"ndcg@{k}"] = report.ndcg[k]
    columns = list(REPORT_COLUMNS[:9]) + [f"ndcg@{k}" for k in cfg.ks] + ["train_secs", "retrieval_secs"]
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            write_report([row], fh, columns)
    else:
        write_report([row], sys.stdout, columns)
    return 0


def cmd_retrieve(args, cfg: RunConfig) -> int:
    model = _load_model(args.model)
    ids = model.user_ids or [str(i) for i in range(model.m)]
    try:
        user = ids.index(args.user)
    except ValueError:
        raise CliError("user-not-found", f"unknown user id {args.user!r}", EXIT_USAGE) from None
    fast = cfg.fast if args.mode is None else args.mode == "fast"
    index = build_index(model, cfg.e)
    query = topk_fast if fast else topk_exact
    result = query(index, user, args.k, exclude_seen=not args.include_seen)
    items = model.item_ids or [str(j) for j in range(model.n)]
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["rank", "item_id", "score"])
    for rank, (j, s) in enumerate(result.pairs(), start=1):
        out.writerow([rank, items[j], s if fast else repr(float(s))])
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    model = _load_model(args.model)
    index = build_index(model, cfg.e)
    users = np.arange(min(args.users, model.m))
    modes = args.modes.split(",") if args.modes else list(MODES)
    for mode in modes:
        if mode not in MODES:
            raise CliError("config-error", f"unknown mode {mode!r}", EXIT_USAGE)
    rows = [benchmark(index, mode, users, k=args.k, repeats=args.repeats) for mode in modes]
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            write_bench_csv(rows, fh)
    else:
        write_bench_csv(rows, sys.stdout)
    return 0


def cmd_experiment(args, cfg: RunConfig) -> int:
    triples = _load_triples(args.input, cfg.format)
    splits = make_splits(triples, cfg.split_seeds, cfg.train_frac, cfg.min_count)
    grid = cfg.grid or [{}]
    t0 = time.perf_counter()
    rows = run_experiment(splits, grid, cfg.train, cfg.mf, cfg.e, cfg.ks, cfg.dataset or args.input, cfg.fast,
                          cfg.candidates, cfg.gain)
    log.info("experiment finished in %.1fs", time.perf_counter() - t0)
    columns = list(REPORT_COLUMNS[:9]) + [f"ndcg@{k}" for k in cfg.ks] + ["train_secs", "retrieval_secs"]
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        write_report(rows, fh, columns)
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cccf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
        return sp

    sp = common(sub.add_parser("prepare", help="filter and split a ratings file"))
    sp.add_argument("input")
    sp.add_argument("--out", required=True, help="output directory for train.csv / test.csv")
    sp.set_defaults(func=cmd_prepare)

    sp = common(sub.add_parser("train", help="train a model from a training split"))
    sp.add_argument("train")
    sp.add_argument("--out", required=True, help="model file to write")
    sp.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("evaluate", help="NDCG@K of a model on a test split"))
    sp.add_argument("model")
    sp.add_argument("test")
    sp.add_argument("--out", help="report CSV (default: stdout)")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("retrieve", help="top-k items for one user"))
    sp.add_argument("model")
    sp.add_argument("user", help="user id as it appears in the training data")
    sp.add_argument("-k", type=int, default=10)
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--fast", dest="mode", action="store_const", const="fast")
    mode.add_argument("--exact", dest="mode", action="store_const", const="exact")
    sp.add_argument("--include-seen", action="store_true", help="do not exclude training items")
    sp.set_defaults(func=cmd_retrieve, mode=None)

    sp = common(sub.add_parser("bench", help="time full-scan retrieval"))
    sp.add_argument("model")
    sp.add_argument("--modes", help=f"comma-separated subset of {','.join(MODES)}")
    sp.add_argument("--users", type=int, default=100, help="number of users to time")
    sp.add_argument("-k", type=int, default=10)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--out", help="benchmark CSV (default: stdout)")
    sp.set_defaults(func=cmd_bench)

    sp = common(sub.add_parser("experiment", help="train and evaluate a grid over shared splits"))
    sp.add_argument("input")
    sp.add_argument("--out", required=True, help="report CSV")
    sp.set_defaults(func=cmd_experiment)
    return p


_ERROR_CATEGORIES = (
    (ParseError, "parse-error"),
    (DataError, "data-error"),
    (modelfile.ModelFormatError, "model-format-error"),
    (MfDivergenceError, "training-diverged"),
    (TrainingDivergedError, "training-diverged"),
    (OrthogonalUpdateError, "orthogonal-update-failed"),
    (IndexOverflowError, "index-overflow"),
    (OSError, "io-error"),
    (ValueError, "invalid-argument"),
)


def main(argv: list[str] | None = None) -> int:
    # keep stderr to the single error line; numba reports an unusable TBB layer here
    warnings.filterwarnings("ignore", message=".*TBB threading layer.*")
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.set)
        apply_threads(cfg)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - mapped to a category below
        for cls, category in _ERROR_CATEGORIES:
            if isinstance(exc, cls):
                message = " ".join(str(exc).split())
                print(f"error: {category}: {message}", file=sys.stderr)
                return EXIT_FAILURE
        raise


if __name__ == "__main__":
    sys.exit(main())
