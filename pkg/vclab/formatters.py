"""Shared output helpers: stderr event lines, text summaries, atomic file writes, CSV."""

from __future__ import annotations

import csv
import io
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


# ---------------------------------------------------------------------------
# Event lines
# ---------------------------------------------------------------------------


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def emit(tag: str, message: str, **fields: Any) -> None:
    """Print one ``[TAG] <utc> message key=value ...`` line to stderr."""
    extra = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
    line = f"[{tag}] {utc_timestamp()} {message}"
    print(f"{line} {extra}" if extra else line, file=sys.stderr)


def warn(message: str, **fields: Any) -> None:
    emit("WARN", message, **fields)


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


# ---------------------------------------------------------------------------
# Text summaries
# ---------------------------------------------------------------------------


def section(title: str, body: str) -> str:
    """Format a titled section."""
    bar = "─" * len(title)
    return f"{title}\n{bar}\n{body}"


def bullet_list(items: list[str]) -> str:
    return "\n".join(f"  • {item}" for item in items)


def kv_table(pairs: list[tuple[str, Any]], indent: int = 0) -> str:
    if not pairs:
        return ""
    max_key = max(len(str(k)) for k, _ in pairs)
    pad = " " * indent
    lines = [f"{pad}{str(k).ljust(max_key)}  {_fmt(v)}" for k, v in pairs]
    return "\n".join(lines)


def pass_fail(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: str | Path, data: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return atomic_write_text(path, csv_text(header, rows))


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
