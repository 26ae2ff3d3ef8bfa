"""Command-line entry point: ``detuq <subcommand> --config <preset-or-path>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, FormatError
from .config import list_presets, load_config
from .report import emit_report, read_report_csv
from .runner import RunLockedError, run_experiment, run_ood, sensitivity_sweep, train_only

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", required=True, help="config file or bundled preset name")
        p.add_argument("--seed", type=int, action="append", help="override the seed list (repeatable)")
        p.add_argument("--jobs", type=int, default=1, help="parallel (strength, seed) jobs")
    p.add_argument("--out", help="output directory (defaults to the config's out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detuq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train", help="train and checkpoint every job"))
    _add_common(sub.add_parser("eval-shift", help="evaluate over the shift schedule"))
    _add_common(sub.add_parser("eval-ood", help="AUROC/AUPR against the OOD dataset"))
    _add_common(sub.add_parser("sweep", help="rAULC vs regularization strength"))
    rep = sub.add_parser("report", help="re-render charts from an existing report.csv")
    _add_common(rep, config=False)
    sub.add_parser("presets", help="list bundled presets")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, FormatError, FileNotFoundError, RunLockedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args) -> int:
    if args.command == "presets":
        print("\n".join(list_presets()))
        return EXIT_OK
    if args.command == "report":
        if not args.out:
            raise ConfigError("report needs --out pointing at a run directory")
        rows = read_report_csv(Path(args.out) / "report.csv")
        for path in emit_report(rows, args.out, formats=("svg",)):
            print(path)
        return EXIT_OK

    cfg = load_config(args.config)
    if args.seed:
        cfg = cfg.replace(seeds=args.seed)
    out = Path(args.out or cfg.out_dir)

    if args.command == "train":
        failures = train_only(cfg, out, args.jobs)
        for msg in failures:
            print(f"diverged: {msg}", file=sys.stderr)
        return EXIT_DIVERGED if failures else EXIT_OK
    if args.command == "eval-shift":
        result = run_experiment(cfg, out, args.jobs)
        print(out / "report.csv")
        return EXIT_DIVERGED if result.failed else EXIT_OK
    if args.command == "eval-ood":
        out.mkdir(parents=True, exist_ok=True)
        rows = run_ood(cfg, out)
        for r in rows:
            print(json.dumps(r))
        return EXIT_DIVERGED if any(r["status"] != "ok" for r in rows) else EXIT_OK
    if args.command == "sweep":
        res = sensitivity_sweep(cfg, out, args.jobs)
        for s, v in zip(res.strengths, res.raulc):
            print(f"strength {s:g}: rAULC {v if v is None else f'{v:.4f}'}")
        print(f"pearson {res.pearson}  spearman {res.spearman}")
        return EXIT_DIVERGED if res.run.failed else EXIT_OK
    raise ConfigError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
