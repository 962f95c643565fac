"""Command-line entry points: ``ladnas <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .arch import (
    DEFAULT_CONFIG,
    CellConfig,
    DiscreteArch,
    EncodingError,
    bits_to_str,
    decode,
    encode,
    space_size,
    str_to_bits,
)
from .lpm import LpmFormatError, LpmTrainConfig, evaluate, load_lpm, save_lpm, train_lpm
from .numeric import make_rng
from .oracle import (
    CollectionAborted,
    CostTable,
    ExternalOracle,
    OracleError,
    SyntheticHardwareModel,
    SyntheticOracle,
    TableOracle,
    collect_dataset,
    external_latency,
    load_dataset,
    load_oracle_config,
    save_dataset,
    split_dataset,
)
from .search import (
    FlopsSearchConfig,
    SearchConfig,
    SearchDiverged,
    arch_flops,
    evaluate_arch,
    history_to_csv,
    make_task,
    run_flops_search,
    run_search,
    save_arch,
)

log = logging.getLogger("ladnas")


class CommandError(Exception):
    """Runtime failure reported with exit status 1."""


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("LADNAS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CommandError(f"LADNAS_SEED must be an integer, got {env!r}")


def write_manifest(out_path, args, seeds, inputs, outputs, started):
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "config": resolved,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    with open(f"{out_path}.manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, default=str)
        fh.write("\n")


def _oracle_params(path):
    if path is None:
        return SyntheticHardwareModel(), CostTable()
    try:
        return load_oracle_config(path)
    except (OSError, ValueError, TypeError) as exc:
        raise CommandError(f"cannot read oracle config {path}: {exc}")


def cmd_collect(args, parser):
    if args.n < 1:
        parser.error("--n must be >= 1")
    if args.repeats < 1:
        parser.error("--repeats must be >= 1")
    if args.oracle == "external" and not args.adapter:
        parser.error("--oracle external requires --adapter")
    started = time.time()
    seed = _seed(args)
    model, table = _oracle_params(args.oracle_config)
    if args.oracle == "synthetic":
        oracle = SyntheticOracle(model)
    elif args.oracle == "table":
        oracle = TableOracle(table)
    else:
        oracle = ExternalOracle(args.adapter, args.timeout)
    try:
        ds = collect_dataset(args.n, oracle, args.repeats, seed, args.dedupe, table,
                             jobs=args.jobs)
    except CollectionAborted as exc:
        save_dataset(exc.partial, args.out)
        raise CommandError(f"{exc}; partial dataset with {len(exc.partial)} records written")
    save_dataset(ds, args.out)
    write_manifest(args.out, args, {"seed": seed}, [], [args.out], started)
    if "failures" in ds.meta:
        raise CommandError(f"{len(ds.meta['failures'])} records failed and were skipped")
    print(f"wrote {len(ds)} records to {args.out}", file=sys.stderr)


def _load_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read dataset {path}: {exc}")


def cmd_train_lpm(args, parser):
    if not 0 < args.split < 1:
        parser.error("--split must be strictly between 0 and 1 (both sides non-empty)")
    started = time.time()
    seed = _seed(args)
    ds = _load_dataset(args.data)
    try:
        train, test = split_dataset(ds, args.split, seed)
    except ValueError as exc:
        parser.error(str(exc))
    cfg = LpmTrainConfig(args.epochs, min(args.batch, len(train)), args.lr, args.momentum,
                         args.weight_decay, seed)
    try:
        lpm = train_lpm(train, cfg)
    except (ValueError, FloatingPointError) as exc:
        raise CommandError(str(exc))
    save_lpm(lpm, args.out)
    report = evaluate(lpm, test, args.pairs, make_rng((seed, 9)))
    write_manifest(args.out, args, {"seed": seed}, [args.data], [args.out], started)
    print(json.dumps({"train_mse": lpm.history[-1], **asdict(report)}))


class _AdapterPredictor:
    def __init__(self, command, timeout):
        self.command = command
        self.timeout = timeout
        self.min_ms, self.max_ms = 0.0, 1.0

    def predict_batch(self, X):
        return np.array([external_latency(x.astype(np.uint8), self.command, self.timeout)
                         for x in X])


def cmd_eval_lpm(args, parser):
    if args.pairs < 2:
        parser.error("--pairs must be >= 2")
    if (args.model is None) == (args.adapter is None):
        parser.error("give exactly one of --model or --adapter")
    started = time.time()
    seed = _seed(args)
    ds = _load_dataset(args.data)
    if args.model is not None:
        try:
            model = load_lpm(args.model)
        except (OSError, LpmFormatError) as exc:
            raise CommandError(str(exc))
        if model.dims[0] != ds.config.num_bits:
            raise CommandError(
                f"model expects {model.dims[0]} input bits, dataset has {ds.config.num_bits}"
            )
    else:
        model = _AdapterPredictor(args.adapter, args.timeout)
    try:
        report = evaluate(model, ds, args.pairs, make_rng((seed, 9)))
    except (ValueError, OracleError) as exc:
        raise CommandError(str(exc))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json() + "\n")
        write_manifest(args.out, args, {"seed": seed}, [args.data], [args.out], started)
    print(report.to_json())


def cmd_search(args, parser):
    flops_mode = args.eta is not None
    if flops_mode and args.lam is not None:
        parser.error("--lambda and --eta are mutually exclusive")
    if args.m < 1 or args.epochs < 1:
        parser.error("--m and --epochs must be >= 1")
    started = time.time()
    seed = _seed(args)
    model, table = _oracle_params(args.oracle_config)
    if args.flops_table:
        _, table = _oracle_params(args.flops_table)
    common = dict(M=args.m, epochs=args.epochs, seed=seed, noise_std=args.noise_std,
                  raw_ms=args.raw_ms)
    lpm = None
    try:
        if flops_mode:
            cfg = FlopsSearchConfig(lam=0.0, eta=args.eta, **common)
            result = run_flops_search(cfg, table, args.task_seed, model)
            coef = {"lambda": None, "eta": args.eta}
        else:
            lam = 0.2 if args.lam is None else args.lam
            cfg = SearchConfig(lam=lam, **common)
            if lam > 0:
                if not args.lpm:
                    parser.error("--lpm is required when lambda > 0")
                try:
                    lpm = load_lpm(args.lpm)
                except (OSError, LpmFormatError) as exc:
                    raise CommandError(str(exc))
            result = run_search(cfg, lpm, args.task_seed, model)
            coef = {"lambda": lam}
    except SearchDiverged as exc:
        raise CommandError(f"search diverged at epoch {exc.epoch}")
    except ValueError as exc:
        parser.error(str(exc))
    final = result.history[-1]
    extra = {**coef, "seed": seed, "task_seed": args.task_seed,
             "probe_latency_ms": final["probe_latency_ms"],
             "flops_m": arch_flops(result.arch, table)}
    if args.eval_epochs > 0:
        task = make_task(args.task_seed)
        extra["val_accuracy"] = evaluate_arch(result.arch, task, args.eval_epochs, seed)
    save_arch(result.arch, args.out, **extra)
    with open(args.history, "w") as fh:
        fh.write(history_to_csv(result))
    write_manifest(args.history, args, {"seed": seed, "task_seed": args.task_seed},
                   [p for p in (args.lpm,) if p], [args.out, args.history], started)
    summary = f"probe_latency_ms={final['probe_latency_ms']:.4f} val_loss={final['val_loss']:.6f}"
    if "val_accuracy" in extra:
        summary += f" val_accuracy={extra['val_accuracy']:.4f}"
    print(summary)


def cmd_space(args, parser):
    if not args.count:
        parser.error("space: nothing to do (use --count)")
    if args.num_intermediate < 1 or args.num_intermediate > 8:
        parser.error("--num-intermediate must be in 1..8")
    cfg = CellConfig(args.num_intermediate)
    print(space_size(cfg, args.k))


def _read_arg_or_stdin(value):
    return sys.stdin.read() if value == "-" else value


def cmd_encode(args, parser):
    try:
        text = sys.stdin.read() if args.arch == "-" else Path(args.arch).read_text()
        doc = json.loads(text)
        edges = doc["edges"] if isinstance(doc, dict) else doc
        arch = DiscreteArch.from_json(edges, DEFAULT_CONFIG)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CommandError(f"invalid architecture: {exc}")
    print(bits_to_str(encode(arch)))


def cmd_decode(args, parser):
    text = _read_arg_or_stdin(args.bits).strip()
    try:
        arch = decode(str_to_bits(text))
    except EncodingError as exc:
        raise CommandError(f"{type(exc).__name__}: {exc}")
    print(json.dumps({"version": 1, "bits": text, "edges": arch.to_json()}))


def _history_paths(items, parser):
    paths = []
    for item in items:
        if os.path.isdir(item):
            found = sorted(glob.glob(os.path.join(item, "*.csv")))
            if not found:
                parser.error(f"no history files in directory {item}")
            paths.extend(found)
        else:
            paths.append(item)
    return paths


def _read_history(path):
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise CommandError(f"cannot read history {path}: {exc}")
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "epoch" or len(header) != 6:
            raise CommandError(f"{path}:1: not a search history header")
        for lineno, rec in enumerate(reader, 2):
            try:
                if len(rec) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(rec)}")
                rows.append({k: float(v) for k, v in zip(header, rec)})
            except ValueError as exc:
                raise CommandError(f"{path}:{lineno}: malformed row ({exc})")
    if not rows:
        raise CommandError(f"{path}: history has no rows")
    return header, rows


def cmd_report(args, parser):
    started = time.time()
    paths = _history_paths(args.history, parser)
    if not paths:
        parser.error("no history files given")
    runs = []
    for path in paths:
        header, rows = _read_history(path)
        kind, coef = ("eta" if header[3] == "exp_flops_m" else "lambda"), float("nan")
        manifest = f"{path}.manifest.json"
        if os.path.exists(manifest):
            with open(manifest) as fh:
                cfg = json.load(fh).get("config", {})
            value = cfg.get("eta") if kind == "eta" else cfg.get("lam")
            if value is None and kind == "lambda":
                value = 0.2
            coef = float(value)
        runs.append({"run": Path(path).stem, "kind": kind, "coef": coef,
                     "probe": rows[-1]["probe_latency_ms"], "val": rows[-1]["val_loss"],
                     "rows": rows})
    runs.sort(key=lambda r: (r["kind"], r["coef"], r["run"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "kind", "coefficient", "final_probe_latency_ms", "final_val_loss"])
        for r in runs:
            w.writerow([r["run"], r["kind"], repr(r["coef"]), repr(r["probe"]), repr(r["val"])])
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "epoch", "train_loss", "val_loss", "total_loss", "probe_latency_ms"])
        for r in runs:
            for row in r["rows"]:
                w.writerow([r["run"], int(row["epoch"]), repr(row["train_loss"]),
                            repr(row["val_loss"]), repr(row["total_loss"]),
                            repr(row["probe_latency_ms"])])
    write_manifest(out / "summary.csv", args, {}, paths, [out / "summary.csv", out / "curves.csv"],
                   started)
    print(f"{'run':<24} {'kind':<7} {'coef':>8} {'latency_ms':>11} {'val_loss':>10}")
    for r in runs:
        print(f"{r['run']:<24} {r['kind']:<7} {r['coef']:>8.4g} {r['probe']:>11.3f} {r['val']:>10.5f}")


def build_parser():
    p = argparse.ArgumentParser(prog="ladnas", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="sample architectures and measure their latency")
    c.add_argument("--oracle", choices=["synthetic", "table", "external"], default="synthetic")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--repeats", type=int, default=20)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.add_argument("--oracle-config")
    c.add_argument("--adapter")
    c.add_argument("--timeout", type=float, default=30.0)
    c.add_argument("--dedupe", action="store_true")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train-lpm", help="train the latency predictor")
    t.add_argument("--data", required=True)
    t.add_argument("--split", type=float, default=0.8)
    t.add_argument("--epochs", type=int, default=1000)
    t.add_argument("--batch", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=1e-5)
    t.add_argument("--pairs", type=int, default=2000)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_lpm)

    e = sub.add_parser("eval-lpm", help="error and rank metrics of a predictor")
    e.add_argument("--model")
    e.add_argument("--adapter", help="external predictor speaking the adapter protocol")
    e.add_argument("--timeout", type=float, default=30.0)
    e.add_argument("--data", required=True)
    e.add_argument("--pairs", type=int, default=2000)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_lpm)

    s = sub.add_parser("search", help="latency- or FLOPs-aware architecture search")
    s.add_argument("--lpm")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--m", type=int, default=20)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--seed", type=int)
    s.add_argument("--task-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--history", required=True)
    s.add_argument("--noise-std", type=float, default=0.0)
    s.add_argument("--raw-ms", action="store_true", help="use lambda * LAT in ms, unnormalised")
    s.add_argument("--flops-table")
    s.add_argument("--eta", type=float)
    s.add_argument("--oracle-config", help="synthetic model used for the latency probe")
    s.add_argument("--eval-epochs", type=int, default=10,
                   help="retraining epochs for the final accuracy check (0 disables)")
    s.set_defaults(func=cmd_search)

    sp = sub.add_parser("space", help="search-space size")
    sp.add_argument("--count", action="store_true")
    sp.add_argument("--num-intermediate", type=int, default=4)
    sp.add_argument("--k", type=int, default=7, help="operations excluding none")
    sp.set_defaults(func=cmd_space)

    en = sub.add_parser("encode", help="architecture JSON -> 112-bit string")
    en.add_argument("--arch", required=True, help="file path or - for stdin")
    en.set_defaults(func=cmd_encode)

    de = sub.add_parser("decode", help="112-bit string -> architecture JSON")
    de.add_argument("--bits", required=True, help="bit string or - for stdin")
    de.set_defaults(func=cmd_decode)

    r = sub.add_parser("report", help="summarise search histories")
    r.add_argument("--history", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        args.func(args, sub)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
