"""Lightweight run telemetry.

Writes compact JSONL events for quick local inspection and times filter
phases. Events are only written when SLAM_METRICS_ENABLED is set.
"""
from __future__ import annotations

import json
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any


def _logs_dir(base: str | None = None) -> Path:
    """
    Get logs directory with date-based rotation.

    Returns:
        Path to <LOGS_DIR>/metrics/YYYY-MM-DD/
    """
    from slam.config import get_settings

    base = base or get_settings().LOGS_DIR
    today = datetime.now(timezone.utc).strftime("%Y-%m-%d")
    p = Path(base) / "metrics" / today
    p.mkdir(parents=True, exist_ok=True)
    return p


def record_metric(
    kind: str,
    fields: dict[str, Any] | None = None,
    outcome: str | None = None,
    latency_ms: float | None = None,
    force: bool = False,
) -> Path | None:
    """Append a single event to logs/metrics/<date>/slam.jsonl.

    Args:
        kind: Short event kind, e.g. "mc.run", "filter.diverged".
        fields: Arbitrary dict with event fields (run index, seed, linearizer, ...).
        outcome: Optional outcome: ok|diverged.
        latency_ms: Optional duration in milliseconds.
        force: Write even when METRICS_ENABLED is off.

    Returns:
        The file written to, or None when telemetry is disabled.
    """
    from slam.config import get_settings

    if not (force or get_settings().METRICS_ENABLED):
        return None
    entry: dict[str, Any] = {
        "ts": datetime.now(timezone.utc).isoformat(),
        "kind": kind,
        "fields": fields or {},
    }
    if outcome:
        entry["outcome"] = outcome
    if latency_ms is not None:
        entry["latency_ms"] = round(latency_ms, 3)
    out = _logs_dir() / "slam.jsonl"
    with out.open("a", encoding="utf-8") as f:
        f.write(json.dumps(entry, ensure_ascii=False) + "\n")
    return out


class LatencyTracker:
    """Context manager measuring wall-clock milliseconds of a block."""

    def __init__(self, kind: str):
        self.kind = kind
        self.start_time: float | None = None
        self.ms: float = 0.0

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.ms = (time.perf_counter() - (self.start_time or 0.0)) * 1000.0
        return False  # Don't suppress exceptions


def track_latency(kind: str) -> LatencyTracker:
    """Time a block.

    Usage:
        with track_latency("filter.update") as t:
            ...
        elapsed = t.ms
    """
    return LatencyTracker(kind)
