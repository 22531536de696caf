"""Command line interface: `loft-lab run|theory|check|report`."""

import argparse
import logging
import os
import sys

from ..errors import LoftError
from ..util import FileManager, Logger
from .checks import run_checks
from .config import load_config, with_overrides
from .outputs import emit_outputs
from .pipeline import run_theory_suite, run_ticket_pipeline


def _run(args, theory_only=False):
    cfg = load_config(args.config)
    cfg = with_overrides(cfg, seed=args.seed, output_dir=args.out)
    if theory_only and cfg.mode != "theory":
        Logger.error(f"'{args.config}' is a {cfg.mode} configuration; use 'loft-lab run'.")
        return 2
    bundle = run_theory_suite(cfg) if cfg.mode == "theory" else run_ticket_pipeline(cfg)
    emit_outputs(bundle, cfg.output_dir)
    if not bundle.ok:
        Logger.error(f"{bundle.failures} cell(s) failed; see the status column of results.csv.")
        return 1
    return 0


def _check(args):
    results = run_checks(args.seed or 0)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def _print_table(filename):
    rows, headers = FileManager.load_csv(filename)
    widths = [max([len(h)] + [len(row[k]) for row in rows]) for k, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for row in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))


def _report(args):
    shown = 0
    with FileManager.working_directory(args.outdir):
        for filename in ("ledger_summary.csv", "summary.csv"):
            if os.path.exists(os.path.join(args.outdir, filename)):
                print(f"== {filename}")
                _print_table(filename)
                shown += 1
    if not shown:
        Logger.error(f"No summary tables found in '{args.outdir}'.")
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="loft-lab", description="Filter-wise partitioned training experiments.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Verbosity of the loftlab logger.")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("run", "Run the experiment described by a configuration file."),
                            ("theory", "Run a theory configuration.")):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("config", help="Path of the INI configuration.")
        sub.add_argument("--seed", type=int, default=None, help="Run this single master seed instead of the configured ones.")
        sub.add_argument("--out", default=None, help="Output directory, overrides the configuration and LOFTLAB_OUTPUT_DIR.")

    check = commands.add_parser("check", help="Run the built-in oracle checks.")
    check.add_argument("--seed", type=int, default=0, help="Seed of the check generators.")

    report = commands.add_parser("report", help="Print the summary tables of an output directory.")
    report.add_argument("outdir", help="Directory written by 'loft-lab run'.")
    return parser


def main(argv=None):
    """Entry point of `loft-lab`; returns the process exit code."""
    args = build_parser().parse_args(argv)
    Logger.setLevel(getattr(logging, args.log_level))
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "theory":
            return _run(args, theory_only=True)
        if args.command == "check":
            return _check(args)
        return _report(args)
    except (LoftError, OSError) as e:
        Logger.error(f"{type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
