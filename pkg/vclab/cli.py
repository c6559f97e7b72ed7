"""
vclab — adversarial multi-domain feature conversion lab

Subcommands across three groups:
  • Data     — synth-data, convert
  • Training — train
  • Reports  — evaluate, verify-theory

Environment variables:
  VCLAB_PRECISION=f64|f32    — floating-point precision of tensors (default: f64)
  VCLAB_PROGRESS=true        — show a progress bar while training
  VCLAB_CHECK_FINITE=false   — skip NaN/Inf checks at every operation (default: on)

Exit codes: 0 success, 1 usage or input error, 2 numerical failure or missed tolerance.

Run with:
    python -m vclab.cli <command> [options]
"""

from __future__ import annotations

import argparse
import sys
from typing import Callable, Sequence

from vclab.autodiff import NumericalError
from vclab.commands import Command, CommandResult
from vclab.commands.data import DATA_COMMANDS, DATA_HANDLERS
from vclab.commands.reports import REPORT_COMMANDS, REPORT_HANDLERS
from vclab.commands.training import TRAINING_COMMANDS, TRAINING_HANDLERS
from vclab.formatters import emit
from vclab.trainer import TrainingError

# ---------------------------------------------------------------------------
# Command table
# ---------------------------------------------------------------------------

ALL_COMMANDS: list[Command] = DATA_COMMANDS + TRAINING_COMMANDS + REPORT_COMMANDS
ALL_HANDLERS: dict[str, Callable[[argparse.Namespace], CommandResult]] = {
    **DATA_HANDLERS,
    **TRAINING_HANDLERS,
    **REPORT_HANDLERS,
}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

# ---------------------------------------------------------------------------
# Error hints
# ---------------------------------------------------------------------------

_ERROR_HINTS = {
    "cyclegan is pairwise": "CycleGAN trains one domain pair: add --source <domain> --target <domain>.",
    "Manifest not found": "Create a corpus first, e.g. `vclab synth-data --out data/toy`.",
    "No such file or directory": "Check the path; manifests resolve feature files relative to their own directory.",
    "became non-finite": (
        "Training diverged. Lower the learning rates in the config file or run at "
        "VCLAB_PRECISION=f64."
    ),
    "Non-finite gradient": "Training diverged. Lower the learning rates in the config file.",
    "Unknown config key": "Config keys mirror TrainConfig fields; loss weights go under `weights:`.",
    "no domain statistics": "Use a checkpoint written by `vclab train`; it stores per-domain statistics.",
    "has no training utterances": "Every domain needs at least one utterance with split: train.",
}


def _enrich_error(message: str) -> str:
    """Prepend an actionable hint to common failures."""
    for pattern, hint in _ERROR_HINTS.items():
        if pattern in message:
            return f"{hint}\n\n{message}"
    return message


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vclab",
        description="Adversarial multi-domain feature conversion: training, conversion, evaluation, theory checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command in ALL_COMMANDS:
        p = sub.add_parser(command.name, help=command.help, description=command.help)
        for a in command.args:
            p.add_argument(*a.flags, **a.options)
    return parser


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    handler = ALL_HANDLERS.get(args.command)
    if handler is None:
        print(f"Unknown command: {args.command}", file=sys.stderr)
        return EXIT_USAGE

    emit("CLI", f"{args.command} started")
    try:
        result = handler(args)
    except (NumericalError, TrainingError) as exc:
        print(_enrich_error(f"Numerical failure: {exc}"), file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as exc:
        print(_enrich_error(f"Error: {exc}"), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"Unexpected error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    print(result.text)
    emit("CLI", f"{args.command} finished", exit_code=result.exit_code)
    return result.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
