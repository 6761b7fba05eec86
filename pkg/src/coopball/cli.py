"""Command-line front end: batch runs, reports, pretraining, serving."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (ENVIRONMENTS, METHOD_MODES, PRESETS, ExperimentSpec,
                      RunSummary, make_report, run_experiment,
                      write_fixed_policy)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_INVALID = 2


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ValueError(f"bad seed list {text!r}") from exc


def cmd_run(args: argparse.Namespace) -> int:
    try:
        text = Path(args.spec).read_text()
    except OSError as exc:
        print(f"cannot read spec: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        spec = ExperimentSpec.from_json(text)
        overrides = {}
        if args.seeds is not None:
            overrides["seeds"] = _parse_seeds(args.seeds)
        if args.method is not None:
            overrides["method"] = args.method
        if args.env is not None:
            overrides["environment"] = args.env
        if args.preset is not None:
            overrides["preset"] = args.preset
        if overrides:
            spec = replace(spec, **overrides)
    except ValueError as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return EXIT_INVALID

    summary = run_experiment(spec, Path(args.out))
    ok = len(summary.runs) - len(summary.failed_runs)
    print(f"{spec.environment} {spec.method} ({spec.preset}): "
          f"{ok}/{len(summary.runs)} runs completed, "
          f"artifacts in {args.out}")
    for record in summary.failed_runs:
        print(f"  failed {record.directory}: {record.error}",
              file=sys.stderr)
    return EXIT_PARTIAL if summary.failed_runs else EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    summaries = []
    for directory in args.in_dirs:
        path = Path(directory) / "summary.json"
        try:
            summaries.append(RunSummary.from_json(path.read_text()))
        except (OSError, ValueError, KeyError) as exc:
            print(f"cannot load summary from {directory}: {exc}",
                  file=sys.stderr)
            return EXIT_INVALID
    try:
        written = make_report(summaries, Path(args.out))
    except ValueError as exc:
        print(f"cannot build report: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for path in written:
        print(path)
    return EXIT_OK


def cmd_pretrain_fixed(args: argparse.Namespace) -> int:
    try:
        path = write_fixed_policy(Path(args.out), seed=args.seed,
                                  iterations=args.iterations)
    except RuntimeError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_PARTIAL
    print(path)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(environment=args.env, preset=args.preset)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopball",
        description="Shared-control ball-on-board experiments and service.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Execute an experiment spec.")
    run.add_argument("--spec", required=True,
                     help="Path to the experiment spec JSON file.")
    run.add_argument("--out", required=True,
                     help="Output directory for run artifacts.")
    run.add_argument("--seeds", default=None,
                     help="Comma-separated seed list overriding the spec.")
    run.add_argument("--method", default=None,
                     choices=sorted(METHOD_MODES),
                     help="Method override.")
    run.add_argument("--env", default=None, choices=ENVIRONMENTS,
                     help="Environment override.")
    run.add_argument("--preset", default=None, choices=PRESETS,
                     help="Timing preset override.")
    run.set_defaults(func=cmd_run)

    report = sub.add_parser("report",
                            help="Aggregate summaries into tables.")
    report.add_argument("--in", dest="in_dirs", nargs="+", required=True,
                        help="Experiment output directories to aggregate.")
    report.add_argument("--out", required=True,
                        help="Directory for report files.")
    report.set_defaults(func=cmd_report)

    pretrain = sub.add_parser(
        "pretrain-fixed",
        help="Train and save the fixed baseline's keeper checkpoint.")
    pretrain.add_argument("--out", required=True,
                          help="Checkpoint file to write.")
    pretrain.add_argument("--seed", type=int, default=0)
    pretrain.add_argument("--iterations", type=int, default=200)
    pretrain.set_defaults(func=cmd_pretrain_fixed)

    serve = sub.add_parser("serve", help="Run the live session service.")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--env", default="env1", choices=ENVIRONMENTS)
    serve.add_argument("--preset", default="sim", choices=PRESETS)
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
