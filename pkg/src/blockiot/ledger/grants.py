"""Time-limited access grants over a patient's stable name link."""

from __future__ import annotations

import hashlib
import secrets
import threading
import uuid
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from typing import Callable, Mapping, Optional

from blockiot.clock import Clock, format_instant, parse_instant, truncate_ms, utcnow
from blockiot.errors import GrantExpired, GrantUnknown, NameNotFound, UnknownRequester, UnknownSubject
from blockiot.ledger.chain import Ledger, TxKind

DEFAULT_GRANT_DURATION = timedelta(hours=24)
ROLE_EHR = "ehr"
ROLE_ADMIN = "admin"
ROLES = (ROLE_EHR, ROLE_ADMIN)


class NodeRegistry:
    """Known ledger participants and their roles."""

    def __init__(self, nodes: Mapping[str, str] | None = None):
        self._nodes: dict[str, str] = {}
        for node_id, role in (nodes or {}).items():
            self.register(node_id, role)

    def register(self, node_id: str, role: str = ROLE_EHR) -> None:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
        self._nodes[node_id] = role

    def role(self, node_id: str) -> Optional[str]:
        return self._nodes.get(node_id)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._nodes

    def items(self):
        return self._nodes.items()


def token_digest(token: str) -> str:
    return hashlib.sha256(token.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class AccessGrant:
    grant_id: str
    requester: str
    subject: Optional[str]  # None: admin grant covering every patient
    name_link: str  # bearer token; empty when rebuilt from the ledger
    issued_at: datetime
    expires_at: datetime

    def live_at(self, now: datetime) -> bool:
        return now < self.expires_at

    def to_dict(self) -> dict:
        return {
            "grant_id": self.grant_id,
            "requester": self.requester,
            "subject": self.subject,
            "token": self.name_link,
            "issued_at": format_instant(self.issued_at),
            "expires_at": format_instant(self.expires_at),
        }


class GrantService:
    """Mints, resolves and revokes grants. Only token digests are kept or logged.

    ``resolve_name`` maps a subject peer id to its current content id; in the
    node this is the patient folder's name record.
    """

    def __init__(
        self,
        ledger: Ledger,
        nodes: NodeRegistry,
        resolve_name: Callable[[str], str],
        has_subject: Callable[[str], bool],
        clock: Clock = utcnow,
        default_duration: timedelta = DEFAULT_GRANT_DURATION,
    ):
        self.ledger = ledger
        self.nodes = nodes
        self._resolve_name = resolve_name
        self._has_subject = has_subject
        self.clock = clock
        self.default_duration = default_duration
        self._by_digest: dict[str, AccessGrant] = {}
        self._by_id: dict[str, str] = {}
        self._lock = threading.Lock()
        self.rebuild()

    def rebuild(self) -> None:
        """Reconstruct the grant table from ledger transactions."""
        with self._lock:
            self._by_digest.clear()
            self._by_id.clear()
            for tx in self.ledger.transactions():
                if tx.kind is TxKind.ACCESS_GRANT:
                    b = tx.body
                    grant = AccessGrant(
                        b["grant_id"], b["requester"], tx.subject or None, "",
                        parse_instant(b["issued_at"]), parse_instant(b["expires_at"]),
                    )
                    self._by_digest[b["token_digest"]] = grant
                    self._by_id[b["grant_id"]] = b["token_digest"]
                elif tx.kind is TxKind.GRANT_REVOKED:
                    digest = self._by_id.get(tx.body["grant_id"])
                    if digest is not None:
                        g = self._by_digest[digest]
                        revoked = parse_instant(tx.body["revoked_at"])
                        self._by_digest[digest] = replace(g, expires_at=min(g.expires_at, revoked))

    def grant_access(
        self, requester: str, subject: Optional[str], duration: Optional[timedelta] = None
    ) -> AccessGrant:
        role = self.nodes.role(requester)
        if role is None:
            raise UnknownRequester(requester)
        if subject is None:
            if role != ROLE_ADMIN:
                raise UnknownSubject("only admin nodes may hold patient-wide grants")
        elif not self._has_subject(subject):
            raise UnknownSubject(subject)
        duration = self.default_duration if duration is None else duration
        if duration <= timedelta(0):
            raise ValueError("grant duration must be positive")
        issued = truncate_ms(self.clock())
        token = secrets.token_urlsafe(32)
        grant = AccessGrant(uuid.uuid4().hex, requester, subject, token, issued, issued + duration)
        digest = token_digest(token)
        subj = subject or ""
        self.ledger.record(TxKind.ACCESS_REQUEST, subj, {"requester": requester}, actor=requester)
        self.ledger.record(
            TxKind.ACCESS_GRANT,
            subj,
            {
                "grant_id": grant.grant_id,
                "requester": requester,
                "token_digest": digest,
                "issued_at": format_instant(grant.issued_at),
                "expires_at": format_instant(grant.expires_at),
            },
        )
        with self._lock:
            self._by_digest[digest] = grant
            self._by_id[grant.grant_id] = digest
        return grant

    def lookup(self, token: str) -> AccessGrant:
        with self._lock:
            grant = self._by_digest.get(token_digest(token or ""))
        if grant is None:
            raise GrantUnknown("unknown grant token")
        return grant

    def check(self, token: str, now: Optional[datetime] = None, subject: Optional[str] = None) -> AccessGrant:
        """Validate without resolving; raises GrantUnknown/GrantExpired."""
        grant = self.lookup(token)
        now = self.clock() if now is None else now
        if not grant.live_at(now):
            raise GrantExpired(f"grant {grant.grant_id} expired at {format_instant(grant.expires_at)}")
        if subject is not None and grant.subject not in (None, subject):
            raise GrantUnknown("grant does not cover this patient")
        return grant

    def resolve_grant(self, token: str, now: Optional[datetime] = None, subject: Optional[str] = None) -> str:
        """Return the subject's current content id and log the access."""
        grant = self.check(token, now, subject)
        target = grant.subject or subject
        if target is None:
            raise UnknownSubject("patient-wide grants must name a subject to resolve")
        try:
            cid = self._resolve_name(target)
        except NameNotFound:
            raise UnknownSubject(target) from None
        self.ledger.record(
            TxKind.ACCESS_RESOLVED, target, {"grant_id": grant.grant_id, "cid": cid},
            actor=grant.requester,
        )
        return cid

    def revoke(self, grant_id: str) -> AccessGrant:
        now = truncate_ms(self.clock())
        with self._lock:
            digest = self._by_id.get(grant_id)
            if digest is None:
                raise GrantUnknown(grant_id)
            grant = self._by_digest[digest]
            grant = replace(grant, expires_at=min(grant.expires_at, now))
            self._by_digest[digest] = grant
        self.ledger.record(
            TxKind.GRANT_REVOKED, grant.subject or "",
            {"grant_id": grant_id, "revoked_at": format_instant(now)},
        )
        return grant
