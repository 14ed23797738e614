"""Hybrid envelope encryption and the local keyring.

Content is sealed once with a fresh AES-256-GCM key. That key is wrapped for
each recipient with an ephemeral X25519 exchange (HKDF-SHA256 -> AES-GCM key
wrap), so every listed recipient and nobody else can open the record.
"""

from __future__ import annotations

import base64
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from blockiot.canonical import canonical_json
from blockiot.errors import NoRecipients, WrongKey

SCHEME_TAG = "x25519-hkdf-sha256+aes-256-gcm/v1"
_WRAP_INFO = b"blockiot key wrap v1"
_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def public_bytes(key: X25519PublicKey) -> bytes:
    return key.public_bytes(**_RAW)


def private_bytes(key: X25519PrivateKey) -> bytes:
    return key.private_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PrivateFormat.Raw,
        encryption_algorithm=serialization.NoEncryption(),
    )


@dataclass(frozen=True)
class RecipientSlot:
    recipient_id: str
    wrapped_key: bytes  # ephemeral public (32) || nonce (12) || AES-GCM(content key) (48)


@dataclass(frozen=True)
class EncryptedRecord:
    ciphertext: bytes
    recipient_slots: tuple[RecipientSlot, ...]
    nonce: bytes
    scheme_tag: str = SCHEME_TAG

    @property
    def recipient_ids(self) -> tuple[str, ...]:
        return tuple(s.recipient_id for s in self.recipient_slots)

    def to_bytes(self) -> bytes:
        return canonical_json(
            {
                "ciphertext": _b64(self.ciphertext),
                "nonce": _b64(self.nonce),
                "recipients": [
                    {"id": s.recipient_id, "wrapped_key": _b64(s.wrapped_key)}
                    for s in self.recipient_slots
                ],
                "scheme": self.scheme_tag,
            }
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedRecord":
        d = json.loads(data)
        return cls(
            ciphertext=_unb64(d["ciphertext"]),
            nonce=_unb64(d["nonce"]),
            recipient_slots=tuple(
                RecipientSlot(r["id"], _unb64(r["wrapped_key"])) for r in d["recipients"]
            ),
            scheme_tag=d["scheme"],
        )


def _kek(shared: bytes, eph_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=eph_pub + recipient_pub, info=_WRAP_INFO
    ).derive(shared)


def encrypt_record(
    plaintext: bytes, recipients: Mapping[str, X25519PublicKey]
) -> EncryptedRecord:
    if not recipients:
        raise NoRecipients("at least one recipient public key is required")
    content_key = AESGCM.generate_key(bit_length=256)
    nonce = os.urandom(12)
    ciphertext = AESGCM(content_key).encrypt(nonce, plaintext, SCHEME_TAG.encode())
    slots = []
    for rid in sorted(recipients):
        pub = recipients[rid]
        eph = X25519PrivateKey.generate()
        eph_pub = public_bytes(eph.public_key())
        kek = _kek(eph.exchange(pub), eph_pub, public_bytes(pub))
        wrap_nonce = os.urandom(12)
        wrapped = AESGCM(kek).encrypt(wrap_nonce, content_key, rid.encode("utf-8"))
        slots.append(RecipientSlot(rid, eph_pub + wrap_nonce + wrapped))
    return EncryptedRecord(ciphertext, tuple(slots), nonce)


def _unwrap(slot: RecipientSlot, private_key: X25519PrivateKey) -> bytes | None:
    blob = slot.wrapped_key
    if len(blob) < 32 + 12 + 16:
        return None
    eph_pub, wrap_nonce, wrapped = blob[:32], blob[32:44], blob[44:]
    try:
        shared = private_key.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        kek = _kek(shared, eph_pub, public_bytes(private_key.public_key()))
        return AESGCM(kek).decrypt(wrap_nonce, wrapped, slot.recipient_id.encode("utf-8"))
    except (InvalidTag, ValueError):
        return None


def decrypt_record(record: EncryptedRecord, private_key: X25519PrivateKey) -> bytes:
    if record.scheme_tag != SCHEME_TAG:
        raise WrongKey(f"unsupported scheme {record.scheme_tag!r}")
    for slot in record.recipient_slots:
        content_key = _unwrap(slot, private_key)
        if content_key is None:
            continue
        try:
            return AESGCM(content_key).decrypt(
                record.nonce, record.ciphertext, record.scheme_tag.encode()
            )
        except InvalidTag:
            break
    raise WrongKey("key does not open this record")


class Keyring:
    """Maps recipient ids to X25519 key pairs; optionally persisted as JSON.

    Public-only entries are allowed for recipients whose private key lives elsewhere.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._public: dict[str, X25519PublicKey] = {}
        self._private: dict[str, X25519PrivateKey] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        data = json.loads(self.path.read_text("utf-8"))
        for rid, entry in data.items():
            self._public[rid] = X25519PublicKey.from_public_bytes(_unb64(entry["public"]))
            if entry.get("private"):
                self._private[rid] = X25519PrivateKey.from_private_bytes(_unb64(entry["private"]))

    def _save(self) -> None:
        if self.path is None:
            return
        data = {
            rid: {
                "public": _b64(public_bytes(pub)),
                "private": _b64(private_bytes(self._private[rid])) if rid in self._private else None,
            }
            for rid, pub in sorted(self._public.items())
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=2), "utf-8")
        os.chmod(tmp, 0o600)
        os.replace(tmp, self.path)

    def ensure(self, recipient_id: str) -> X25519PublicKey:
        """Return the recipient's public key, generating a key pair if absent."""
        with self._lock:
            if recipient_id not in self._public:
                priv = X25519PrivateKey.generate()
                self._private[recipient_id] = priv
                self._public[recipient_id] = priv.public_key()
                self._save()
            return self._public[recipient_id]

    def add_public(self, recipient_id: str, public: X25519PublicKey | bytes) -> None:
        if isinstance(public, bytes):
            public = X25519PublicKey.from_public_bytes(public)
        with self._lock:
            self._public[recipient_id] = public
            self._private.pop(recipient_id, None)
            self._save()

    def __contains__(self, recipient_id: object) -> bool:
        return recipient_id in self._public

    def public_key(self, recipient_id: str) -> X25519PublicKey:
        return self._public[recipient_id]

    def private_key(self, recipient_id: str) -> X25519PrivateKey:
        return self._private[recipient_id]

    def recipients(self, ids: Iterable[str]) -> dict[str, X25519PublicKey]:
        return {rid: self._public[rid] for rid in ids}
