"""Notification sinks. Alerts end here; delivery to phones or mail is out of scope."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Protocol

from blockiot.errors import UnknownSink


@dataclass(frozen=True)
class Notification:
    sink_id: str
    party: str
    kind: str  # "patient_query" | "physician_alert"
    alert_id: str
    subject: str
    message: str
    at: str

    def to_dict(self) -> dict:
        return asdict(self)


class NotificationSink(Protocol):
    def deliver(self, notification: Notification) -> None: ...


class MemorySink:
    def __init__(self):
        self.delivered: list[Notification] = []
        self._lock = threading.Lock()

    def deliver(self, notification: Notification) -> None:
        with self._lock:
            self.delivered.append(notification)

    def __len__(self) -> int:
        return len(self.delivered)


class FileSink:
    """Appends one JSON object per notification."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def deliver(self, notification: Notification) -> None:
        line = json.dumps(notification.to_dict(), sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


class SinkRegistry:
    def __init__(self, sinks: dict[str, NotificationSink] | None = None):
        self._sinks: dict[str, NotificationSink] = dict(sinks or {})

    def add(self, sink_id: str, sink: NotificationSink) -> None:
        self._sinks[sink_id] = sink

    def get(self, sink_id: str) -> NotificationSink:
        try:
            return self._sinks[sink_id]
        except KeyError:
            raise UnknownSink(sink_id) from None

    def __contains__(self, sink_id: object) -> bool:
        return sink_id in self._sinks

    def __iter__(self) -> Iterator[str]:
        return iter(self._sinks)
