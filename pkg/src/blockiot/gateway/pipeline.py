"""Bounded FIFO between protocol listeners and the storage consumer."""

from __future__ import annotations

import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from blockiot.clock import format_instant, parse_instant
from blockiot.core.model import DeviceReading

DEFAULT_CAPACITY = 65_536


class Protocol(str, Enum):
    HTTP = "Http"
    MQTT = "Mqtt"
    COAP = "Coap"

    @classmethod
    def parse(cls, value: "str | Protocol") -> "Protocol":
        if isinstance(value, cls):
            return value
        for member in cls:
            if member.value.lower() == str(value).lower():
                return member
        raise ValueError(f"unknown protocol {value!r}")


@dataclass(frozen=True)
class IngestEnvelope:
    protocol: Protocol
    received_at: datetime
    source: str
    reading: DeviceReading
    template_id: str
    seq: int = 0
    enqueued_mono: float = field(default=0.0, compare=False)

    @property
    def stream(self) -> tuple[str, str]:
        return (self.reading.peer_id, self.reading.device_type_hint or "")

    def to_dict(self) -> dict:
        r = self.reading
        return {
            "protocol": self.protocol.value,
            "received_at": format_instant(self.received_at),
            "source": self.source,
            "template_id": self.template_id,
            "seq": self.seq,
            "reading": {
                "peer_id": r.peer_id,
                "timestamp": format_instant(r.timestamp),
                "payload": dict(r.payload),
                "device_type_hint": r.device_type_hint,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IngestEnvelope":
        r = d["reading"]
        return cls(
            protocol=Protocol(d["protocol"]),
            received_at=parse_instant(d["received_at"]),
            source=d["source"],
            reading=DeviceReading(
                r["peer_id"], parse_instant(r["timestamp"]), r["payload"], r.get("device_type_hint")
            ),
            template_id=d["template_id"],
            seq=d["seq"],
            enqueued_mono=time.perf_counter(),
        )


class Pipeline:
    """Thread-safe bounded queue; global FIFO, hence FIFO per stream.

    With ``journal`` set, an envelope is written to disk before ``offer``
    returns, and envelopes not yet ``commit``-ted are re-queued on restart.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, journal: str | Path | None = None,
                 fsync: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.fsync = fsync
        self._queue: deque[IngestEnvelope] = deque()
        self._lock = threading.Lock()
        self._not_empty = threading.Condition(self._lock)
        self._next_seq = 1
        self.accepted = 0
        self.drained = 0
        self.journal = Path(journal) if journal is not None else None
        self._fh = None
        if self.journal is not None:
            self._recover()

    def _recover(self) -> None:
        self.journal.parent.mkdir(parents=True, exist_ok=True)
        outstanding: dict[int, dict] = {}
        if self.journal.exists():
            with open(self.journal, encoding="utf-8") as fh:
                for line in fh:
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        continue  # torn tail
                    if rec["op"] == "put":
                        outstanding[rec["env"]["seq"]] = rec["env"]
                    else:
                        outstanding.pop(rec["seq"], None)
        for seq in sorted(outstanding):
            self._queue.append(IngestEnvelope.from_dict(outstanding[seq]))
        self._next_seq = max(outstanding, default=0) + 1
        tmp = self.journal.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for env in self._queue:
                fh.write(json.dumps({"op": "put", "env": env.to_dict()}) + "\n")
        os.replace(tmp, self.journal)
        self._fh = open(self.journal, "a", encoding="utf-8")

    def _log(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def offer(self, env: IngestEnvelope) -> Optional[IngestEnvelope]:
        """Enqueue; returns the stamped envelope, or None when full."""
        with self._lock:
            if len(self._queue) >= self.capacity:
                return None
            env = replace(env, seq=self._next_seq, enqueued_mono=time.perf_counter())
            self._next_seq += 1
            if self._fh is not None:
                self._log({"op": "put", "env": env.to_dict()})
            self._queue.append(env)
            self.accepted += 1
            self._not_empty.notify()
            return env

    def drain(self, batch_limit: int) -> list[IngestEnvelope]:
        with self._lock:
            n = min(max(batch_limit, 0), len(self._queue))
            out = [self._queue.popleft() for _ in range(n)]
            self.drained += n
            return out

    def wait(self, timeout: float) -> bool:
        """Block until something is queued or the timeout passes."""
        with self._lock:
            if self._queue:
                return True
            return self._not_empty.wait(timeout)

    def commit(self, envelopes: Iterable[IngestEnvelope]) -> None:
        """Mark drained envelopes as durably processed."""
        if self._fh is None:
            return
        with self._lock:
            for env in envelopes:
                self._log({"op": "done", "seq": env.seq})

    def __len__(self) -> int:
        return len(self._queue)

    @property
    def full(self) -> bool:
        return len(self._queue) >= self.capacity

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
