"""Command-line surface: validate, run, resume, report, stats, agreement.

Exit codes: 0 success, 1 partial per-record failures, 2 configuration or
validation errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .agreement import AgreementError, agreement_metrics, load_human_codes
from .config import ConfigError, load_config
from .gateway import GatewayError
from .journal import LedgerError
from .model import validate_dataset
from .pipeline import load_dataset, resume, run_pipeline
from .reporting import ReportError, emit_report, emit_agreement_report, load_evaluations

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feedbackloop",
        description="Generate, evaluate, and regenerate quiz feedback; "
                    "compute the reported statistics.")
    parser.add_argument("--config", type=Path, help="path to the run config JSON")
    parser.add_argument("--output", type=Path, help="output run directory (overrides config)")
    parser.add_argument("--mode", choices=["live", "replay"],
                        help="gateway mode (overrides config)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", help="validate the dataset named by the config")
    sub.add_parser("run", help="execute the full pipeline")

    resume_parser = sub.add_parser("resume", help="continue an interrupted run")
    resume_parser.add_argument("run_dir", type=Path)

    report_parser = sub.add_parser("report", help="render the consolidated Markdown report")
    report_parser.add_argument("run_dir", type=Path)

    stats_parser = sub.add_parser("stats", help="recompute the stats tables for a run")
    stats_parser.add_argument("run_dir", type=Path)

    agreement_parser = sub.add_parser(
        "agreement", help="compare a run's model verdicts against human codes")
    agreement_parser.add_argument("run_dir", type=Path)
    agreement_parser.add_argument("human_codes", type=Path)
    return parser


def _require_config(args) -> Path:
    if args.config is None:
        raise ConfigError("this command requires --config")
    return args.config


def _cmd_validate(args) -> int:
    config = load_config(_require_config(args), args.output, args.mode)
    dataset = load_dataset(config)
    violations = validate_dataset(dataset)
    if violations:
        for violation in violations:
            print(f"{violation.record_id}\t{violation.rule}\t{violation.message}")
        print(f"{len(violations)} violation(s) found", file=sys.stderr)
        return EXIT_CONFIG
    print(f"dataset OK: {len(dataset.questions)} questions, "
          f"{len(dataset.responses)} responses, {len(dataset.slides)} slide chunks")
    return EXIT_OK


def _cmd_run(args) -> int:
    config = load_config(_require_config(args), args.output, args.mode)
    result = run_pipeline(config)
    for stage, count in result.counts.items():
        print(f"{stage}: {count}")
    if result.errors:
        print(f"{len(result.errors)} record(s) failed; see errors.jsonl", file=sys.stderr)
    print(f"run directory: {result.run_dir}")
    return result.exit_code


def _cmd_resume(args) -> int:
    result = resume(args.run_dir)
    for stage, count in result.counts.items():
        print(f"{stage}: {count}")
    if result.errors:
        print(f"{len(result.errors)} record(s) failed; see errors.jsonl", file=sys.stderr)
    return result.exit_code


def _cmd_report(args) -> int:
    path = emit_report(args.run_dir)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_stats(args) -> int:
    from .reporting import emit_stats

    stats_dir = emit_stats(args.run_dir)
    print(f"wrote {stats_dir}")
    return EXIT_OK


def _cmd_agreement(args) -> int:
    evals_path = args.run_dir / "evaluations_round1.jsonl"
    if not evals_path.exists():
        raise ReportError(f"missing evaluations artifact: {evals_path}")
    evaluations = list(load_evaluations(evals_path).values())
    human = load_human_codes(args.human_codes)
    report = agreement_metrics(evaluations, human)
    emitted = emit_agreement_report(args.run_dir / "stats", report)
    for row in report.rows:
        print(f"{row.indicator}\taccuracy={row.accuracy:.2f}\tprecision={row.precision:.2f}"
              f"\trecall={row.recall:.2f}\tf1={row.f1:.2f}")
    print(f"wrote {emitted[0]} and {emitted[1]}")
    return EXIT_OK


_COMMANDS = {
    "validate": _cmd_validate,
    "run": _cmd_run,
    "resume": _cmd_resume,
    "report": _cmd_report,
    "stats": _cmd_stats,
    "agreement": _cmd_agreement,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, LedgerError, ReportError, AgreementError, GatewayError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
