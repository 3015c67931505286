"""Command-line harness: ``mlmp run|corrupt|plot|toy-data``.

Exit statuses: 0 success, 2 user/config error, 3 backbone/environment
error, 4 numerical failure (some batch produced a non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation
from .corruptions import KINDS, build_corrupted_dataset
from .datasets import make_toy_dataset
from .experiment import (
    BackboneError,
    ConfigError,
    DatasetMissing,
    build_config,
    read_config_file,
    run_experiment,
)

EXIT_OK, EXIT_USAGE, EXIT_BACKBONE, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mlmp")

_RUN_FLAGS = [
    ("--backbone", str, "toy | toy:<file> | clip:<name-or-path>"),
    ("--dataset", str, "dataset name (v20, v21, p59, p60, cityscapes, coco_stuff, coco_object, toy)"),
    ("--root", str, "dataset root with images/ and labels/"),
    ("--corruptions", str, "comma list of scenarios: original and/or corruption kinds"),
    ("--corruption-root", str, "directory of materialised -C subtrees (optional)"),
    ("--severity", str, "corruption severity for on-the-fly corruption"),
    ("--method", str, "comma list drawn from none,tent,mlmp"),
    ("--steps", str, "adaptation steps per batch"),
    ("--lr", str, "Adam learning rate"),
    ("--batch-size", str, "images per adaptation batch"),
    ("--templates", str, "comma list of template ids 1-7, or 'all'"),
    ("--layer-range", str, "inclusive block range such as 7-24 (default: last 75%%)"),
    ("--beta-eval", str, "confidence-weight sharpness at prediction time"),
    ("--seed", str, "base seed"),
    ("--out", str, "output directory"),
    ("--repeats", str, "repeats per grid cell"),
    ("--workers", str, "parallel grid workers"),
    ("--window", str, "sliding-window tile size"),
    ("--stride", str, "sliding-window stride"),
]


def _add_run(sub):
    p = sub.add_parser("run", help="run an adaptation experiment grid")
    p.add_argument("--config", help="INI-style config file; flags override its keys")
    for flag, typ, help_ in _RUN_FLAGS:
        p.add_argument(flag, type=typ, default=None, help=help_)
    p.add_argument("--exclude-background", action="store_const", const="true", default=None,
                   help="leave the background class out of mIoU")
    p.add_argument("--sliding-window", choices=["true", "false"], default=None,
                   help="force sliding-window prediction on or off")
    p.set_defaults(func=cmd_run)


def _add_corrupt(sub):
    p = sub.add_parser("corrupt", help="materialise corrupted copies of a dataset")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--kinds", default=",".join(KINDS))
    p.add_argument("--severity", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_corrupt)


def _add_plot(sub):
    p = sub.add_parser("plot", help="plot layer weights or mIoU bars from run outputs")
    p.add_argument("--logs", nargs="+", required=True, help="run_log.ndjson files")
    p.add_argument("--what", choices=["layer_weights", "miou_bars"], default="layer_weights")
    p.add_argument("--report", help="report.json (miou_bars; default: next to the first log)")
    p.add_argument("--out", default=None, help="output directory (default: next to the first log)")
    p.set_defaults(func=cmd_plot)


def _add_toy(sub):
    p = sub.add_parser("toy-data", help="write the seeded 3-class toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=64)
    p.set_defaults(func=cmd_toy)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlmp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_corrupt(sub)
    _add_plot(sub)
    _add_toy(sub)
    return parser


def cmd_run(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    for key in ["backbone", "dataset", "root", "corruptions", "corruption_root", "severity",
                "method", "steps", "lr", "batch_size", "templates", "layer_range", "beta_eval",
                "seed", "out", "repeats", "workers", "window", "stride", "exclude_background",
                "sliding_window"]:
        value = getattr(args, key)
        if value is not None:
            values[key] = value
    cfg = build_config(values)
    payload, flagged = run_experiment(cfg)
    for table in payload["tables"]:
        for row in table["rows"]:
            print(f"{table['dataset']}\t{table['method']}\t{row['scenario']}\t"
                  f"{evaluation.format_cell(row['mean'], row['std'])}")
    if flagged:
        log.error("%d batch(es) produced non-finite losses", flagged)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_corrupt(args) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in KINDS]
    if unknown:
        print(f"unknown corruption(s) {', '.join(unknown)}; valid kinds: {', '.join(KINDS)}",
              file=sys.stderr)
        return EXIT_USAGE
    manifest = build_corrupted_dataset(args.src, args.dst, kinds, args.severity, args.seed, args.workers)
    for entry in manifest["kinds"]:
        print(f"{entry['kind']}\t{entry['file_count']}\t{entry['checksum'][:16]}")
    if manifest["skipped"]:
        print(f"{len(manifest['skipped'])} file(s) skipped; see manifest.json", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_plot(args) -> int:
    records = []
    for path in args.logs:
        if not Path(path).exists():
            print(f"no such log: {path}", file=sys.stderr)
            return EXIT_USAGE
        records.extend(evaluation.read_run_log(path))
    if not records:
        print("run logs are empty", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else Path(args.logs[0]).parent
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "layer_weights":
        mlmp_records = [r for r in records if r.get("method") == "mlmp"] or records
        table = evaluation.layer_weight_table(evaluation.layer_weight_stats(mlmp_records))
        paths = evaluation.plot_layer_weights(table, out)
    else:
        report = Path(args.report) if args.report else Path(args.logs[0]).parent / "report.json"
        if not report.exists():
            print(f"miou_bars needs a report.json; {report} not found", file=sys.stderr)
            return EXIT_USAGE
        paths = evaluation.plot_miou_bars(json.loads(report.read_text()), out)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_toy(args) -> int:
    manifest = make_toy_dataset(args.out, args.n, args.seed, args.side)
    print(f"wrote {manifest['count']} toy images to {args.out} (checksum {manifest['checksum'][:16]})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, DatasetMissing, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackboneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKBONE


if __name__ == "__main__":
    sys.exit(main())
