"""Injectable clocks and the timestamp wire format."""

from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone
from typing import Callable, Union

Clock = Callable[[], datetime]


def truncate_ms(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        raise ValueError("naive datetimes are not accepted; attach a timezone")
    dt = dt.astimezone(timezone.utc)
    return dt.replace(microsecond=dt.microsecond - dt.microsecond % 1000)


def utcnow() -> datetime:
    return truncate_ms(datetime.now(timezone.utc))


def format_instant(dt: datetime) -> str:
    """Render as ``YYYY-MM-DDTHH:MM:SS.mmmZ``."""
    dt = truncate_ms(dt)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{dt.microsecond // 1000:03d}Z"


def parse_instant(value: Union[str, int, float, datetime]) -> datetime:
    """Accept ISO-8601 strings (``Z`` or offset) or epoch milliseconds."""
    if isinstance(value, datetime):
        return truncate_ms(value)
    if isinstance(value, bool):
        raise ValueError("boolean is not a timestamp")
    if isinstance(value, (int, float)):
        return truncate_ms(datetime.fromtimestamp(value / 1000.0, tz=timezone.utc))
    if not isinstance(value, str):
        raise ValueError(f"unsupported timestamp type {type(value).__name__}")
    text = value.strip()
    if text.endswith("Z") or text.endswith("z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return truncate_ms(dt)


class ManualClock:
    """A clock that only moves when told to. Used for expiry and timeout tests."""

    def __init__(self, start: datetime | None = None):
        self._now = truncate_ms(start or datetime(2024, 1, 1, tzinfo=timezone.utc))
        self._lock = threading.Lock()

    def __call__(self) -> datetime:
        with self._lock:
            return self._now

    def set(self, when: datetime) -> None:
        with self._lock:
            self._now = truncate_ms(when)

    def advance(self, delta: timedelta | float) -> datetime:
        if not isinstance(delta, timedelta):
            delta = timedelta(seconds=delta)
        with self._lock:
            self._now = truncate_ms(self._now + delta)
            return self._now
