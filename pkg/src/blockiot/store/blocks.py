"""Immutable content-addressed block storage."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from pathlib import Path
from typing import Protocol

from blockiot.canonical import canonical_json
from blockiot.errors import CorruptBlock, IoFailure, NotFound, StorageFull

CID_PREFIX = "b-"
DEFAULT_BLOCK_LIMIT = 1 << 20
_CHUNK_MARKER = "blockiot-chunks"


def cid_for(data: bytes) -> str:
    return CID_PREFIX + hashlib.sha256(data).hexdigest()


def is_cid(value: object) -> bool:
    return (
        isinstance(value, str)
        and value.startswith(CID_PREFIX)
        and len(value) == len(CID_PREFIX) + 64
        and all(c in "0123456789abcdef" for c in value[len(CID_PREFIX):])
    )


class BlockStore(Protocol):
    block_limit: int

    def put_block(self, data: bytes) -> str: ...

    def get_block(self, cid: str) -> bytes: ...

    def has_block(self, cid: str) -> bool: ...


class _BlockStoreBase:
    block_limit: int = DEFAULT_BLOCK_LIMIT

    def put_object(self, data: bytes) -> str:
        """Store bytes of any size; oversize payloads become a chunk-list block."""
        if len(data) <= self.block_limit:
            return self.put_block(data)
        chunks = [
            self.put_block(data[i:i + self.block_limit])
            for i in range(0, len(data), self.block_limit)
        ]
        manifest = canonical_json({_CHUNK_MARKER: chunks, "size": len(data)})
        return self.put_block(manifest)

    def get_object(self, cid: str) -> bytes:
        data = self.get_block(cid)
        if data.startswith(b'{"' + _CHUNK_MARKER.encode() + b'"'):
            manifest = json.loads(data)
            out = b"".join(self.get_block(c) for c in manifest[_CHUNK_MARKER])
            if len(out) != manifest["size"]:
                raise CorruptBlock(f"chunked object {cid} reassembled to wrong size")
            return out
        return data


class MemoryBlockStore(_BlockStoreBase):
    def __init__(self, block_limit: int = DEFAULT_BLOCK_LIMIT, capacity_bytes: int | None = None):
        self.block_limit = block_limit
        self.capacity_bytes = capacity_bytes
        self._blocks: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put_block(self, data: bytes) -> str:
        data = bytes(data)
        if len(data) > self.block_limit:
            raise ValueError(f"block of {len(data)} bytes exceeds limit {self.block_limit}")
        cid = cid_for(data)
        with self._lock:
            if cid in self._blocks:
                return cid
            if self.capacity_bytes is not None and self.total_bytes + len(data) > self.capacity_bytes:
                raise StorageFull("block store capacity exhausted")
            self._blocks[cid] = data
        return cid

    def get_block(self, cid: str) -> bytes:
        try:
            data = self._blocks[cid]
        except KeyError:
            raise NotFound(cid) from None
        if cid_for(data) != cid:
            raise CorruptBlock(cid)
        return data

    def has_block(self, cid: str) -> bool:
        return cid in self._blocks

    def delete_block(self, cid: str) -> None:
        """Fault injection only; blocks are otherwise never removed."""
        self._blocks.pop(cid, None)

    @property
    def block_count(self) -> int:
        return len(self._blocks)

    @property
    def total_bytes(self) -> int:
        return sum(len(b) for b in self._blocks.values())


class FileBlockStore(_BlockStoreBase):
    """Blocks live at ``<root>/<first-2-hex>/<digest>``."""

    def __init__(
        self,
        root: str | Path,
        block_limit: int = DEFAULT_BLOCK_LIMIT,
        capacity_bytes: int | None = None,
        fsync: bool = False,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.block_limit = block_limit
        self.capacity_bytes = capacity_bytes
        self.fsync = fsync
        self._lock = threading.Lock()
        self._count = 0
        self._bytes = 0
        for p in self.root.glob("??/*"):
            if p.is_file() and not p.name.startswith("."):
                self._count += 1
                self._bytes += p.stat().st_size

    def path_for(self, cid: str) -> Path:
        if not is_cid(cid):
            raise NotFound(f"malformed cid {cid!r}")
        digest = cid[len(CID_PREFIX):]
        return self.root / digest[:2] / digest

    def put_block(self, data: bytes) -> str:
        data = bytes(data)
        if len(data) > self.block_limit:
            raise ValueError(f"block of {len(data)} bytes exceeds limit {self.block_limit}")
        cid = cid_for(data)
        path = self.path_for(cid)
        with self._lock:
            if path.exists():
                return cid
            if self.capacity_bytes is not None and self._bytes + len(data) > self.capacity_bytes:
                raise StorageFull("block store capacity exhausted")
            try:
                path.parent.mkdir(exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                    if self.fsync:
                        fh.flush()
                        os.fsync(fh.fileno())
                os.replace(tmp, path)
            except OSError as exc:
                raise IoFailure(f"writing {cid}: {exc}") from exc
            self._count += 1
            self._bytes += len(data)
        return cid

    def get_block(self, cid: str) -> bytes:
        path = self.path_for(cid)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(cid) from None
        except OSError as exc:
            raise IoFailure(f"reading {cid}: {exc}") from exc
        if cid_for(data) != cid:
            raise CorruptBlock(f"{cid}: content digest mismatch")
        return data

    def has_block(self, cid: str) -> bool:
        try:
            return self.path_for(cid).exists()
        except NotFound:
            return False

    def delete_block(self, cid: str) -> None:
        """Fault injection only; blocks are otherwise never removed."""
        path = self.path_for(cid)
        if path.exists():
            with self._lock:
                self._bytes -= path.stat().st_size
                self._count -= 1
                path.unlink()

    @property
    def block_count(self) -> int:
        return self._count

    @property
    def total_bytes(self) -> int:
        return self._bytes
