"""
Integration test fixtures — full toy training runs, enabled with VCLAB_RUN_SLOW=1.
"""

from __future__ import annotations

import os

import pytest


def _slow_enabled() -> bool:
    return os.environ.get("VCLAB_RUN_SLOW", "").lower() in ("1", "true", "yes")


skip_unless_slow = pytest.mark.skipif(
    not _slow_enabled(),
    reason="VCLAB_RUN_SLOW not set — skipping end-to-end training runs",
)
