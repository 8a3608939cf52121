"""Command-line front end: ``python -m svwa <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 failed ordering assertion (``sweep --assert-ordering``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as H
from .adaptation import METHODS, VARIATION_SOURCES
from .data import make_dataset, save_dataset
from .errors import ConfigError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ASSERT = 0, 2, 3, 4

# flag name -> config key for the options shared by the run subcommands
_RUN_FLAGS = {
    "data": "data", "checkpoint": "checkpoint", "out": "out", "method": "method",
    "corruption": "corruption", "nv": "nv", "iters": "iters", "batch_size": "batch_size",
    "mode": "mode", "variation_source": "variation_source", "seed": "seed",
    "repeats": "repeats", "lr": "lr", "epochs": "epochs", "pretrain_lr": "pretrain_lr",
    "pretrain_batch_size": "pretrain_batch_size", "fps_points": "fps_points",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--data", help="dataset file written by gen-data (generated in memory if omitted)")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--corruption", help="kind:severity, or 'clean'")
    p.add_argument("--nv", type=int, help="number of sampling variations")
    p.add_argument("--iters", type=int, help="adaptation steps per batch and branch")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mode", choices=("parallel", "sequential"))
    p.add_argument("--variation-source", choices=VARIATION_SOURCES)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--lr", type=float, help="adaptation learning rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-lr", type=float)
    p.add_argument("--pretrain-batch-size", type=int)
    p.add_argument("--fps-points", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svwa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset file")
    g.add_argument("--out", required=True, help="dataset path (split sidecar goes to PATH.split)")
    g.add_argument("--train-per-class", type=int, default=250)
    g.add_argument("--test-per-class", type=int, default=50)
    g.add_argument("--points", type=int, default=1024)
    g.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="supervised pretraining, writes a checkpoint")
    _run_options(p)

    a = sub.add_parser("adapt", help="evaluate one method on one corrupted stream")
    _run_options(a)
    a.add_argument("--format", choices=("csv", "json"), default="csv")

    s = sub.add_parser("sweep", help="evaluate a one-axis grid of configurations")
    _run_options(s)
    s.add_argument("--sweep", required=True, help="AXIS=v1,v2,... e.g. nv=2,6,12 or method=source-only,tent,svwa")
    s.add_argument("--corruptions", help="comma-separated corruption list crossed with the sweep")
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--assert-ordering", action="store_true",
                   help="exit with status 4 unless the sweep shows the expected ordering")

    r = sub.add_parser("report", help="re-emit reports from stored result rows")
    r.add_argument("results", help="results.csv or results.json")
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.add_argument("--method", choices=METHODS, help="keep only this method")
    r.add_argument("--corruption", help="keep only this corruption kind")
    return parser


def _config(args) -> H.ExperimentConfig:
    overrides = {key: getattr(args, flag) for flag, key in _RUN_FLAGS.items()}
    text = Path(args.config).read_text() if args.config else ""
    return H.ExperimentConfig.from_text(text, overrides)


def _cmd_gen_data(args) -> int:
    ds = make_dataset(args.train_per_class, args.test_per_class, args.points, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.clouds)} clouds to {args.out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg = _config(args)
    if not cfg.checkpoint:
        cfg = cfg.replace(checkpoint=str(Path(cfg.out) / "model.svwa"))
    Path(cfg.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    _, history = H.run_pretrain(cfg)
    cfg.save(Path(cfg.checkpoint).with_name(Path(cfg.checkpoint).name + ".cfg"))
    print(f"clean accuracy {history[-1]['clean_accuracy']:.4f}; checkpoint {cfg.checkpoint}")
    return EXIT_OK


def _finish(cells, rows, cfg, fmt) -> list[Path]:
    cfg.save(Path(cfg.out) / "config.txt")
    H.write_cell_configs(cells, cfg.out)
    paths = H.emit_report(rows, cfg.out, fmt)
    header, table = H.summary_table(rows)
    print("  ".join(header))
    for line in table:
        print("  ".join([line[0], *(f"{v:.2f}" for v in line[1:])]))
    return paths


def _cmd_adapt(args) -> int:
    cfg = _config(args)
    rows = H.run_adapt_eval(cfg)
    _finish([cfg], rows, cfg, args.format)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _config(args)
    axis, values = H.parse_sweep(args.sweep)
    corruptions = args.corruptions.split(",") if args.corruptions else None
    cells = H.sweep_configs(cfg, axis, values, corruptions)
    rows = H.run_sweep(cells)
    _finish(cells, rows, cfg, args.format)
    if args.assert_ordering:
        failures = H.ordering_failures(rows, axis)
        for f in failures:
            print(f"ORDERING FAILED {f}", file=sys.stderr)
        if failures:
            return EXIT_ASSERT
        print("ordering holds")
    return EXIT_OK


def _cmd_report(args) -> int:
    rows = H.read_rows(args.results)
    if args.method:
        rows = [r for r in rows if r["method"] == args.method]
    if args.corruption:
        rows = [r for r in rows if r["corruption"] == args.corruption.split(":")[0]]
    if not rows:
        print("no rows match the filter", file=sys.stderr)
        return EXIT_CONFIG
    for path in H.emit_report(rows, args.out, args.format):
        print(path)
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "adapt": _cmd_adapt,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    # file-format errors are ValueErrors too, so they must be caught first
    except (OSError, FormatError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
