"""Command-line entry point.

Usage: ``metadiv <subcommand> --config <file.json> [--out DIR]
[--seed-override N] [--no-plots]``.

Subcommands map one-to-one onto experiments: div-sweep, train, eval,
repsim, pathology, correlate, hist. Exit codes: 0 success, 2 usage error
(bad flags or malformed config), 1 runtime failure. Failures emit a
machine-readable error JSON on stderr and, once the output directory
exists, into ``error.json`` there; a manifest is written at start and
finalized at the end of every run that gets an output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .harness import ConfigError, RunManifest, load_config, run_experiment
from .harness.config import SeedSet

__all__ = ["main", "build_parser", "SUBCOMMANDS"]

SUBCOMMANDS = {
    "div-sweep": "div_sweep",
    "train": "train",
    "eval": "eval_matrix",
    "repsim": "repsim",
    "pathology": "pathology",
    "correlate": "correlate",
    "hist": "histogram",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metadiv",
        description="Task-diversity and meta-learning experiments on Gaussian benchmarks.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, experiment in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {experiment} experiment")
        p.add_argument("--config", required=True, help="path to the run's JSON config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument(
            "--seed-override",
            type=int,
            default=None,
            metavar="N",
            help="replace the four seeds with N, N+1, N+2, N+3 (benchmark, train, eval, probe)",
        )
        p.add_argument(
            "--no-plots", action="store_true", help="write CSV/JSON outputs only"
        )
    return parser


def _error_payload(exc: Exception, config_path) -> dict:
    return {
        "error": {
            "type": type(exc).__name__,
            "message": str(exc),
            "config": str(config_path),
        }
    }


def _emit_error(payload: dict, out_dir=None) -> None:
    text = json.dumps(payload, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            with open(Path(out_dir) / "error.json", "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        except OSError:
            pass  # stderr already carries the report


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    experiment = SUBCOMMANDS[args.subcommand]
    try:
        config = load_config(args.config)
        if config.experiment != experiment:
            raise ConfigError(
                f"config is for experiment {config.experiment!r}, "
                f"but subcommand {args.subcommand!r} runs {experiment!r}"
            )
        if args.seed_override is not None:
            n = args.seed_override
            config = dataclasses.replace(
                config, seeds=SeedSet(benchmark=n, train=n + 1, eval=n + 2, probe=n + 3)
            )
        if args.no_plots:
            config = dataclasses.replace(config, plots=False)
        if args.out is not None:
            config = dataclasses.replace(config, out_dir=str(args.out))
    except ConfigError as exc:
        _emit_error(_error_payload(exc, args.config))
        return 2

    out_dir = Path(config.out_dir) if config.out_dir else Path("runs") / experiment
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _emit_error(_error_payload(exc, args.config))
        return 2

    manifest = RunManifest.start(experiment, config.echo(), out_dir)
    try:
        run_experiment(config, out_dir)
    except Exception as exc:  # noqa: BLE001  (boundary: report, record, exit nonzero)
        payload = _error_payload(exc, args.config)
        manifest.finalize(out_dir, "failed", error=payload["error"])
        _emit_error(payload, out_dir)
        return 1
    manifest.finalize(out_dir, "completed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
