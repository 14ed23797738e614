"""Single-writer hash-chained transaction ledger."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

from blockiot.canonical import ZERO_DIGEST, canonical_json, digest_of
from blockiot.clock import Clock, format_instant, parse_instant, utcnow
from blockiot.errors import InvalidTransaction


class TxKind(str, Enum):
    GENESIS = "Genesis"
    ACCESS_REQUEST = "AccessRequest"
    ACCESS_GRANT = "AccessGrant"
    ACCESS_RESOLVED = "AccessResolved"
    GRANT_REVOKED = "GrantRevoked"
    ALERT_RAISED = "AlertRaised"
    ALERT_TRANSITION = "AlertTransition"
    ALERT_RESOLVED = "AlertResolved"
    ADHERENCE_REPORT = "AdherenceReport"


REQUIRED_BODY_FIELDS: dict[TxKind, frozenset[str]] = {
    TxKind.GENESIS: frozenset({"note"}),
    TxKind.ACCESS_REQUEST: frozenset({"requester"}),
    TxKind.ACCESS_GRANT: frozenset({"grant_id", "requester", "token_digest", "issued_at", "expires_at"}),
    TxKind.ACCESS_RESOLVED: frozenset({"grant_id", "cid"}),
    TxKind.GRANT_REVOKED: frozenset({"grant_id", "revoked_at"}),
    TxKind.ALERT_RAISED: frozenset({"alert_id", "device_type", "field", "status", "source"}),
    TxKind.ALERT_TRANSITION: frozenset({"alert_id", "stage"}),
    TxKind.ALERT_RESOLVED: frozenset({"alert_id", "stage"}),
    TxKind.ADHERENCE_REPORT: frozenset({"expected", "taken", "rate", "missed"}),
}

_TX_KEYS = frozenset({"tx_id", "kind", "actor", "subject", "body", "at"})
_BLOCK_KEYS = frozenset({"index", "prev_hash", "timestamp", "transactions", "hash"})


def _strict_instant(value: Any) -> datetime:
    if not isinstance(value, str):
        raise ValueError("timestamp must be a string")
    dt = parse_instant(value)
    if format_instant(dt) != value:
        raise ValueError(f"non-canonical timestamp {value!r}")
    return dt


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    kind: TxKind
    actor: str
    subject: str
    body: Mapping[str, Any]
    at: datetime

    @staticmethod
    def compute_id(kind: TxKind | str, actor: str, subject: str, body: Mapping, at: datetime) -> str:
        return digest_of(
            {
                "kind": getattr(kind, "value", kind),
                "actor": actor,
                "subject": subject,
                "body": body,
                "at": format_instant(at),
            }
        )

    @classmethod
    def create(
        cls, kind: TxKind, actor: str, subject: str, body: Mapping[str, Any], at: datetime
    ) -> "Transaction":
        body = json.loads(canonical_json(dict(body)))  # detach and normalize
        return cls(cls.compute_id(kind, actor, subject, body, at), TxKind(kind), actor, subject, body, at)

    def problems(self) -> list[str]:
        out = []
        if self.compute_id(self.kind, self.actor, self.subject, self.body, self.at) != self.tx_id:
            out.append("tx_id does not recompute from body")
        missing = REQUIRED_BODY_FIELDS[TxKind(self.kind)] - set(self.body)
        if missing:
            out.append(f"{TxKind(self.kind).value} missing body fields {sorted(missing)}")
        return out

    def to_dict(self) -> dict:
        return {
            "tx_id": self.tx_id,
            "kind": TxKind(self.kind).value,
            "actor": self.actor,
            "subject": self.subject,
            "body": self.body,
            "at": format_instant(self.at),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Transaction":
        if not isinstance(d, Mapping) or set(d) != _TX_KEYS:
            raise ValueError("transaction has unexpected keys")
        if not all(isinstance(d[k], str) for k in ("tx_id", "actor", "subject")):
            raise ValueError("transaction string fields malformed")
        if not isinstance(d["body"], dict):
            raise ValueError("transaction body must be an object")
        return cls(d["tx_id"], TxKind(d["kind"]), d["actor"], d["subject"], d["body"], _strict_instant(d["at"]))


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: str
    timestamp: datetime
    transactions: tuple[Transaction, ...]
    hash: str

    @staticmethod
    def compute_hash(index: int, prev_hash: str, timestamp: datetime, tx_ids: Iterable[str]) -> str:
        return digest_of(
            {
                "index": index,
                "prev_hash": prev_hash,
                "timestamp": format_instant(timestamp),
                "tx_ids": list(tx_ids),
            }
        )

    @classmethod
    def seal(cls, index: int, prev_hash: str, timestamp: datetime, txs: Sequence[Transaction]) -> "Block":
        txs = tuple(txs)
        return cls(index, prev_hash, timestamp, txs,
                   cls.compute_hash(index, prev_hash, timestamp, (t.tx_id for t in txs)))

    def recomputed_hash(self) -> str:
        return self.compute_hash(self.index, self.prev_hash, self.timestamp,
                                 (t.tx_id for t in self.transactions))

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "prev_hash": self.prev_hash,
            "timestamp": format_instant(self.timestamp),
            "transactions": [t.to_dict() for t in self.transactions],
            "hash": self.hash,
        }

    def to_line(self) -> bytes:
        return canonical_json(self.to_dict()) + b"\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Block":
        if not isinstance(d, Mapping) or set(d) != _BLOCK_KEYS:
            raise ValueError("block has unexpected keys")
        if not isinstance(d["index"], int) or isinstance(d["index"], bool):
            raise ValueError("block index must be an integer")
        if not isinstance(d["prev_hash"], str) or not isinstance(d["hash"], str):
            raise ValueError("block hashes must be strings")
        if not isinstance(d["transactions"], list):
            raise ValueError("block transactions must be a list")
        return cls(
            d["index"], d["prev_hash"], _strict_instant(d["timestamp"]),
            tuple(Transaction.from_dict(t) for t in d["transactions"]), d["hash"],
        )


@dataclass(frozen=True)
class BlockRef:
    index: int
    position: int
    tx_id: str


@dataclass(frozen=True)
class Issue:
    index: int  # position in the chain (line number - 1 for files)
    reason: str


@dataclass
class VerificationReport:
    issues: list[Issue] = field(default_factory=list)
    blocks_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.issues

    @property
    def flagged(self) -> list[int]:
        return sorted({i.index for i in self.issues})

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "blocks_checked": self.blocks_checked,
            "issues": [{"index": i.index, "reason": i.reason} for i in self.issues],
        }


def verify_chain(chain: Sequence[Optional[Block]]) -> VerificationReport:
    """Check every block's hash, transaction ids and back-link.

    ``None`` entries stand for blocks that could not be decoded. Once a block
    fails, every later block is flagged as well since its ancestry is no
    longer trustworthy.
    """
    report = VerificationReport(blocks_checked=len(chain))
    broken_at: Optional[int] = None
    for pos, block in enumerate(chain):
        problems: list[str] = []
        if block is None:
            problems.append("undecodable block")
        else:
            if block.index != pos:
                problems.append(f"index {block.index} at position {pos}")
            if not block.transactions:
                problems.append("empty transaction list")
            for tx in block.transactions:
                problems.extend(f"tx {tx.tx_id[:12]}: {p}" for p in tx.problems())
            if block.recomputed_hash() != block.hash:
                problems.append("block hash does not recompute")
            if pos == 0:
                if block.prev_hash != ZERO_DIGEST:
                    problems.append("genesis prev_hash is not the zero digest")
            else:
                prev = chain[pos - 1]
                if prev is None or block.prev_hash != prev.hash:
                    problems.append("prev_hash does not match predecessor")
        if problems:
            report.issues.extend(Issue(pos, p) for p in problems)
            if broken_at is None:
                broken_at = pos
        elif broken_at is not None:
            report.issues.append(Issue(pos, f"ancestry broken at block {broken_at}"))
    return report


def decode_chain(data: bytes) -> tuple[list[Optional[Block]], list[Issue]]:
    """Decode newline-delimited canonical JSON, strictly.

    Any line that is not valid UTF-8, not valid JSON, not byte-identical to its
    canonical re-encoding, or structurally wrong decodes to ``None``.
    """
    issues: list[Issue] = []
    if data and not data.endswith(b"\n"):
        issues.append(Issue(max(data.count(b"\n"), 0), "missing final newline"))
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    blocks: list[Optional[Block]] = []
    for pos, raw in enumerate(lines):
        try:
            obj = json.loads(raw.decode("utf-8"))
            if canonical_json(obj) != raw:
                raise ValueError("non-canonical encoding")
            blocks.append(Block.from_dict(obj))
        except (UnicodeDecodeError, ValueError, TypeError, KeyError) as exc:
            issues.append(Issue(pos, f"decode: {exc}"))
            blocks.append(None)
    return blocks, issues


def verify_chain_bytes(data: bytes) -> VerificationReport:
    blocks, decode_issues = decode_chain(data)
    report = verify_chain(blocks)
    report.issues = decode_issues + report.issues
    if not blocks and not decode_issues:
        report.issues.append(Issue(0, "empty chain"))
    return report


def verify_chain_file(path: str | Path) -> VerificationReport:
    return verify_chain_bytes(Path(path).read_bytes())


class Ledger:
    """Append transactions; blocks seal on a size or age threshold.

    With ``path`` set, every sealed block is appended to the file as one
    canonical JSON line and the chain is reloaded from it on start.
    """

    def __init__(
        self,
        path: str | Path | None = None,
        clock: Clock = utcnow,
        seal_size: int = 64,
        seal_interval: timedelta = timedelta(seconds=5),
        actor: str = "blockiot",
    ):
        if seal_size < 1:
            raise ValueError("seal_size must be >= 1")
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self.seal_size = seal_size
        self.seal_interval = seal_interval
        self.actor = actor
        self._lock = threading.RLock()
        self._blocks: list[Block] = []
        self._pending: list[Transaction] = []
        self._pending_since: Optional[datetime] = None
        if self.path is not None and self.path.exists() and self.path.stat().st_size:
            blocks, issues = decode_chain(self.path.read_bytes())
            if not issues:
                issues = verify_chain(blocks).issues
            if issues:
                raise InvalidTransaction(f"ledger file {self.path} is damaged: {issues[:3]}")
            self._blocks = list(blocks)
        if not self._blocks:
            genesis_tx = Transaction.create(
                TxKind.GENESIS, actor, "", {"note": "genesis"}, self.clock()
            )
            self._commit(Block.seal(0, ZERO_DIGEST, self.clock(), [genesis_tx]))

    def _commit(self, block: Block) -> None:
        self._blocks.append(block)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as fh:
                fh.write(block.to_line())

    def record(self, kind: TxKind, subject: str, body: Mapping[str, Any], actor: str | None = None) -> Transaction:
        tx = Transaction.create(kind, actor or self.actor, subject, body, self.clock())
        self.append_transaction(tx)
        return tx

    def append_transaction(self, tx: Transaction) -> BlockRef:
        if TxKind(tx.kind) is TxKind.GENESIS:
            raise InvalidTransaction("genesis transactions cannot be appended")
        problems = tx.problems()
        if problems:
            raise InvalidTransaction("; ".join(problems))
        with self._lock:
            self._maybe_seal_by_age()
            if not self._pending:
                self._pending_since = self.clock()
            self._pending.append(tx)
            ref = BlockRef(len(self._blocks), len(self._pending) - 1, tx.tx_id)
            if len(self._pending) >= self.seal_size:
                self.seal()
            return ref

    def _maybe_seal_by_age(self) -> None:
        if self._pending and self.clock() - self._pending_since >= self.seal_interval:
            self.seal()

    def tick(self) -> Optional[Block]:
        """Seal the pending block if it is old enough."""
        with self._lock:
            before = len(self._blocks)
            self._maybe_seal_by_age()
            return self._blocks[-1] if len(self._blocks) > before else None

    def seal(self) -> Optional[Block]:
        with self._lock:
            if not self._pending:
                return None
            prev = self._blocks[-1]
            block = Block.seal(prev.index + 1, prev.hash, self.clock(), self._pending)
            self._pending = []
            self._pending_since = None
            self._commit(block)
            return block

    @property
    def blocks(self) -> list[Block]:
        with self._lock:
            return list(self._blocks)

    @property
    def pending(self) -> list[Transaction]:
        with self._lock:
            return list(self._pending)

    def __len__(self) -> int:
        return len(self._blocks)

    def transactions(self, kind: TxKind | None = None, include_pending: bool = True) -> Iterator[Transaction]:
        with self._lock:
            txs = [t for b in self._blocks for t in b.transactions]
            if include_pending:
                txs += self._pending
        for t in txs:
            if kind is None or t.kind is kind:
                yield t

    def verify(self) -> VerificationReport:
        return verify_chain(self.blocks)

    def export(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.export_bytes())
        return path

    def export_bytes(self) -> bytes:
        return b"".join(b.to_line() for b in self.blocks)
