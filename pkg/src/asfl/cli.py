"""Command line: ``asfl run``, ``asfl sweep``, ``asfl compare``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config as C
from .experiment import compare, run_experiment, sweep

log = logging.getLogger("asfl")

OUT_ENV = "ASFL_OUT"

# flag dest -> config field
_FIELD_FLAGS = {
    "scheme": "scheme",
    "seed": "seed",
    "rounds": "rounds",
    "lr": "lr",
    "batch_size": "batch_size",
    "local_epochs": "local_epochs",
    "n_vehicles": "n_vehicles",
    "cut": "cut",
    "aggregation": "aggregation",
    "model": "model",
    "partition": "partition.mode",
    "labels_per_vehicle": "partition.labels_per_vehicle",
    "power_alpha": "partition.power_alpha",
}


def _thresholds(text: str) -> list[float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("expected four comma-separated rates")
    return parts


def _assignment(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected key=value")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _add_config_flags(p: argparse.ArgumentParser, with_scheme: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON run config")
    if with_scheme:
        p.add_argument("--scheme", help="cl, fl, sl, sfl, asfl (sl/sfl accept a cut suffix, e.g. sfl4)")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--n-vehicles", type=int)
    p.add_argument("--cut", type=int)
    p.add_argument("--aggregation")
    p.add_argument("--model")
    p.add_argument("--partition", choices=("iid", "noniid"))
    p.add_argument("--labels-per-vehicle", type=int)
    p.add_argument("--power-alpha", type=float)
    p.add_argument("--thresholds", type=_thresholds, help="r1,r2,r3,r4 in bit/s")
    p.add_argument("--set", dest="assignments", action="append", type=_assignment, default=[],
                   metavar="FIELD=JSON", help="override any config field, e.g. dataset.synth.per_class=50")
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./runs)")


def _overrides(args) -> dict:
    ov = {}
    for dest, field in _FIELD_FLAGS.items():
        if hasattr(args, dest):
            ov[field] = getattr(args, dest)
    ov["thresholds"] = args.thresholds
    for key, value in args.assignments:
        ov[key] = value
    return ov


def _file_values(args) -> dict:
    return C.load_config_file(args.config) if args.config else {}


def _out_dir(args, cfg) -> Path:
    return args.out or (Path(cfg["out"]) if cfg.get("out") else Path(os.environ.get(OUT_ENV, "runs")))


def cmd_run(args) -> int:
    cfg = C.resolve(_file_values(args), _overrides(args))
    summary = run_experiment(cfg, _out_dir(args, cfg))
    print(json.dumps({k: summary[k] for k in ("scheme", "final_accuracy", "total_bytes",
                                              "total_wall_clock", "files")}, indent=2))
    return 0


def cmd_sweep(args) -> int:
    base = C.combine(_file_values(args), _overrides(args))
    schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    if not schemes:
        raise C.ConfigError("schemes: empty list")
    out = args.out or (Path(base["out"]) if base.get("out") else Path(os.environ.get(OUT_ENV, "runs")))
    for summary in sweep(base, schemes, out):
        print(f"{summary['scheme']:<8} bytes={summary['total_bytes']} "
              f"wall_clock={summary['total_wall_clock']:.4f}s acc={summary['final_accuracy']:.4f}")
    return 0


def cmd_compare(args) -> int:
    text, table = compare(args.files)
    sys.stdout.write(text)
    if args.csv:
        args.csv.write_text(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scheme")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run several schemes on one config")
    _add_config_flags(p, with_scheme=False)
    p.add_argument("--schemes", required=True, help="comma-separated, e.g. fl,sl,sfl2,sfl4,sfl6,sfl8,asfl")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="compare metrics CSV files")
    p.add_argument("files", nargs="+", type=Path)
    p.add_argument("--csv", type=Path, help="also write the pairwise table as CSV")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
