"""``flipclass`` command line.

Subcommands: ``run``, ``gradcheck``, ``energy-trace``, ``datagen`` and ``eval``.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one line to stderr::

    flipclass-error kind=config line=4 key=lr message="..."
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import build_config, load_config, load_data_spec, parse_override
from .data import GcdDataset, generate
from .errors import ConfigError, FlipClassError
from .evaluation import hungarian_accuracy
from .harness import TrainConfig, run_suite, train

OUTPUT_ROOT_ENV = "FLIPCLASS_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _error_line(kind: str, message: str, line=None, key=None) -> str:
    parts = [f"kind={kind}"]
    if line is not None:
        parts.append(f"line={line}")
    if key is not None:
        parts.append(f"key={key}")
    parts.append(f"message={json.dumps(str(message))}")
    return "flipclass-error " + " ".join(parts)


def _resolve_config(args) -> TrainConfig:
    overrides = dict(parse_override(item) for item in args.set or [])
    for flag in ("seed", "epochs"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    if args.config:
        return load_config(args.config, overrides)
    return build_config({"version": (1, None)}, overrides, "<defaults>")


def _output_root(args, cfg: TrainConfig) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get(OUTPUT_ROOT_ENV)
    if env:
        return Path(env)
    return Path(cfg.out_dir or "runs")


# -- subcommands -----------------------------------------------------------


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    root = _output_root(args, cfg)
    if args.seeds:
        summary = run_suite({cfg.mode: cfg}, args.seeds, root, threads=args.threads)
        entry = summary[cfg.mode]
        for m in ("acc_all", "acc_old", "acc_new"):
            print(f"{m} = {entry['mean'][m]:.4f} +- {entry['std'][m]:.4f} (n={len(entry['runs'])})")
        if entry["failures"]:
            for seed, err in entry["failures"].items():
                print(_error_line("runtime", f"seed {seed}: {err}"), file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK
    report = train(cfg.replace(out_dir=str(root)))
    print(report.final.to_text(), end="")
    print(f"outputs written to {root}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    rows = run_all(seed=args.seed)
    width = max(len(name) for name, _ in rows)
    print(f"{'check':<{width}}  status  max_rel_err  max_abs_err  tol")
    for name, rep in rows:
        status = "PASS" if rep.passed else "FAIL"
        print(f"{name:<{width}}  {status:<6}  {rep.max_rel_err:.3e}    {rep.max_abs_err:.3e}    {rep.rel_tol:g}")
    failed = [name for name, rep in rows if not rep.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_energy_trace(args) -> int:
    cfg = _resolve_config(args)
    root = _output_root(args, cfg)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for mode in ("flipclass", "none"):
        rep = train(cfg.replace(mode=mode, out_dir=None))
        rows = rep.rows()
        cols = ["epoch"] + [c for c in rows[0] if c.startswith("energy_layer_")]
        path = root / f"energy_{mode}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in rows:
                w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
        written.append(path)
    print("\n".join(str(p) for p in written))
    return EXIT_OK


def cmd_datagen(args) -> int:
    spec = load_data_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    ds = generate(spec)
    ds.dump(args.out)
    print(f"{ds.X.shape[0]} samples ({ds.labeled_idx.size} labeled, {ds.unlabeled_idx.size} unlabeled, "
          f"{ds.test_idx.size} test) written to {args.out}")
    return EXIT_OK


def _read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    idx, preds = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["index", "pred"]:
            raise ConfigError(f"{path}:1: expected header 'index,pred'", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                i, p = (int(v) for v in row)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: expected two integers", line=lineno) from exc
            idx.append(i)
            preds.append(p)
    return np.array(idx, dtype=np.intp), np.array(preds, dtype=np.intp)


def cmd_eval(args) -> int:
    ds = GcdDataset.load(args.dataset)
    idx, preds = _read_predictions(args.preds)
    if idx.size and (idx.min() < 0 or idx.max() >= ds.X.shape[0]):
        raise ConfigError(f"{args.preds}: sample index outside the dataset")
    report = hungarian_accuracy(preds, ds.y[idx], ds.old_classes, ds.n_classes)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# -- parser ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as a single ``flipclass-error`` line."""

    def error(self, message):
        print(_error_line("usage", f"{self.prog}: {message}"), file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (see README)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--epochs", type=int, help="number of epochs (overrides the config)")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}, then out_dir, then ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flipclass", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"flipclass {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one run or a multi-seed suite")
    _config_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", help="run a suite over these seeds")
    p.add_argument("--threads", type=int, default=1, help="parallel workers for a suite (runs stay single-threaded)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference verification table")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("energy-trace", help="paired per-epoch energy CSVs with and without alignment")
    _config_flags(p)
    p.set_defaults(func=cmd_energy_trace)

    p = sub.add_parser("datagen", help="generate a synthetic dataset file")
    p.add_argument("spec", help="dataset spec file (key = value)")
    p.add_argument("out", help="dataset file to write")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("eval", help="score a predictions file against a dataset")
    p.add_argument("preds", help="CSV with header 'index,pred'")
    p.add_argument("dataset", help="dataset file written by datagen")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("--threads must be at least 1", key="threads")
        return args.func(args)
    except ConfigError as exc:
        print(_error_line("config", exc, exc.line, exc.key), file=sys.stderr)
        return EXIT_USAGE
    except (FlipClassError, OSError, ArithmeticError, ValueError) as exc:
        print(_error_line("runtime", f"{type(exc).__name__}: {exc}"), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
