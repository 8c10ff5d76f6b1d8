"""Timestamp helpers: ISO 8601 UTC with millisecond precision.

All persistence and wire formats carry timestamps as strings like
``2021-03-01T08:15:30.125Z``; internally everything is integer epoch
milliseconds.
"""
from __future__ import annotations

import time
from datetime import datetime, timezone

__all__ = ["parse_utc_ms", "format_utc_ms", "now_ms", "is_utc_literal"]

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def parse_utc_ms(text: str) -> int:
    """Parse an ISO 8601 timestamp into epoch milliseconds.

    Accepts a trailing ``Z`` or an explicit offset; naive timestamps are
    rejected. Sub-millisecond digits are truncated.
    """
    if not isinstance(text, str):
        raise ValueError(f"timestamp must be a string, got {type(text).__name__}")
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise ValueError(f"not an ISO 8601 timestamp: {text!r}") from exc
    if dt.tzinfo is None:
        raise ValueError(f"timestamp has no UTC offset: {text!r}")
    return epoch_ms(dt)


def epoch_ms(dt: datetime) -> int:
    """Epoch milliseconds of an aware datetime, without float round-trip."""
    if dt.tzinfo is None:
        raise ValueError("naive datetime")
    delta = dt - _EPOCH
    return delta.days * 86_400_000 + delta.seconds * 1000 + delta.microseconds // 1000


def format_utc_ms(ms: int) -> str:
    """Render epoch milliseconds as ``YYYY-MM-DDTHH:MM:SS.mmmZ``."""
    seconds, millis = divmod(int(ms), 1000)
    dt = datetime.fromtimestamp(seconds, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + f".{millis:03d}Z"


def is_utc_literal(text: str) -> bool:
    """True when the string spells its offset as UTC (``Z`` or ``+00:00``)."""
    t = text.strip()
    return t.endswith(("Z", "z", "+00:00", "+0000"))


def now_ms() -> int:
    return int(time.time() * 1000)
