"""Mutable naming layer: stable name keys pointing at the latest content id."""

from __future__ import annotations

import os
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterator

from blockiot.clock import Clock, format_instant, parse_instant, utcnow
from blockiot.errors import NameNotFound, UnknownCid
from blockiot.store.blocks import BlockStore


def name_key(peer_id: str, device_type: str) -> str:
    return f"{peer_id}/{getattr(device_type, 'value', device_type)}"


@dataclass(frozen=True)
class NameRecord:
    name_key: str
    current: str
    sequence: int
    updated_at: datetime


class NameStore:
    """Name records with an optional append-only journal.

    Journal lines are ``name_key<TAB>sequence<TAB>cid<TAB>timestamp``; the
    newest sequence per name wins on reload.
    """

    def __init__(self, blocks: BlockStore, journal: str | Path | None = None, clock: Clock = utcnow):
        self.blocks = blocks
        self.clock = clock
        self.journal = Path(journal) if journal is not None else None
        self._records: dict[str, NameRecord] = {}
        self._lock = threading.Lock()
        self._name_locks: dict[str, threading.RLock] = defaultdict(threading.RLock)
        self._fh = None
        if self.journal is not None:
            self.journal.parent.mkdir(parents=True, exist_ok=True)
            if self.journal.exists():
                self._replay()
            self._fh = open(self.journal, "a", encoding="utf-8")

    def _replay(self) -> None:
        with open(self.journal, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 4:
                    continue  # torn final write
                key, seq, cid, ts = parts
                rec = NameRecord(key, cid, int(seq), parse_instant(ts))
                prev = self._records.get(key)
                if prev is None or rec.sequence > prev.sequence:
                    self._records[key] = rec

    @contextmanager
    def exclusive(self, key: str) -> Iterator[None]:
        """Serialize read-modify-publish cycles on one name."""
        with self._lock:
            lock = self._name_locks[key]
        with lock:
            yield

    def publish_name(self, key: str, cid: str) -> NameRecord:
        if not self.blocks.has_block(cid):
            raise UnknownCid(cid)
        with self.exclusive(key):
            with self._lock:
                prev = self._records.get(key)
                rec = NameRecord(key, cid, (prev.sequence if prev else 0) + 1, self.clock())
                self._records[key] = rec
                if self._fh is not None:
                    self._fh.write(
                        f"{key}\t{rec.sequence}\t{cid}\t{format_instant(rec.updated_at)}\n"
                    )
                    self._fh.flush()
        return rec

    def resolve_name(self, key: str) -> str:
        return self.record(key).current

    def record(self, key: str) -> NameRecord:
        try:
            return self._records[key]
        except KeyError:
            raise NameNotFound(key) from None

    def __contains__(self, key: object) -> bool:
        return key in self._records

    def keys(self) -> list[str]:
        with self._lock:
            return list(self._records)

    def sync(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
