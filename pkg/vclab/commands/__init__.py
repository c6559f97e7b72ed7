"""Declarative subcommand definitions shared by the command modules and the cli."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any


class UsageError(ValueError):
    """Bad flags or inputs; the cli exits with status 1."""


@dataclass(frozen=True)
class Arg:
    flags: tuple[str, ...]
    options: dict[str, Any] = field(default_factory=dict)


def arg(*flags: str, **options: Any) -> Arg:
    return Arg(flags, options)


@dataclass(frozen=True)
class Command:
    name: str
    help: str
    args: tuple[Arg, ...] = ()


@dataclass
class CommandResult:
    """Text for stdout plus the exit status (2 when a verified tolerance was missed)."""

    text: str
    exit_code: int = 0
