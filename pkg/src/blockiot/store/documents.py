"""Per-patient, per-device encrypted documents and the patient folder.

Each (patient, device type) stream is one JSON document, observations in
timestamp order, encrypted for the system and the patient's physician EHR,
stored as a block and published under ``<peer_id>/<device_type>``. A
plaintext folder block listing the current document ids is published under
``<peer_id>`` so one stable link covers the whole patient.
"""

from __future__ import annotations

import bisect
import json
import uuid
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Iterable, Mapping, Optional

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey

from blockiot.canonical import canonical_json
from blockiot.clock import format_instant
from blockiot.core.model import DeviceType, HarmonizedObservation, PatientProfile
from blockiot.errors import DecryptFailure, NameNotFound, PeerIdCollision, UnknownPatient, WrongKey
from blockiot.store.blocks import _BlockStoreBase
from blockiot.store.crypto import EncryptedRecord, Keyring, decrypt_record, encrypt_record
from blockiot.store.names import NameStore, name_key

PROFILE = "profile"


@dataclass(frozen=True)
class DocumentEntry:
    seq: int
    observation: HarmonizedObservation


@dataclass
class PatientDocument:
    logical_id: str
    peer_id: str
    device_type: DeviceType
    entries: list[DocumentEntry] = field(default_factory=list)
    next_seq: int = 0

    @property
    def observations(self) -> list[HarmonizedObservation]:
        return [e.observation for e in self.entries]

    def insert(self, obs: HarmonizedObservation, regression_tolerance: timedelta) -> DocumentEntry:
        if self.entries:
            latest = self.entries[-1].observation.timestamp
            if obs.timestamp < latest - regression_tolerance:
                obs = obs.with_warning(
                    f"timestamp regression: {format_instant(obs.timestamp)} precedes "
                    f"latest {format_instant(latest)}"
                )
        entry = DocumentEntry(self.next_seq, obs)
        self.next_seq += 1
        # bisect_right keeps arrival order among equal timestamps
        stamps = [e.observation.timestamp for e in self.entries]
        self.entries.insert(bisect.bisect_right(stamps, obs.timestamp), entry)
        return entry

    def to_dict(self) -> dict:
        return {
            "logical_id": self.logical_id,
            "peer_id": self.peer_id,
            "device_type": self.device_type.value,
            "next_seq": self.next_seq,
            "observations": [dict(e.observation.to_dict(), seq=e.seq) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PatientDocument":
        return cls(
            logical_id=d["logical_id"],
            peer_id=d["peer_id"],
            device_type=DeviceType(d["device_type"]),
            entries=[
                DocumentEntry(o["seq"], HarmonizedObservation.from_dict(o)) for o in d["observations"]
            ],
            next_seq=d["next_seq"],
        )


class DocumentStore:
    def __init__(
        self,
        blocks: _BlockStoreBase,
        names: NameStore,
        keyring: Keyring,
        system_id: str = "system",
        regression_tolerance: timedelta = timedelta(seconds=60),
    ):
        self.blocks = blocks
        self.names = names
        self.keyring = keyring
        self.system_id = system_id
        self.regression_tolerance = regression_tolerance
        keyring.ensure(system_id)

    # -- encrypted objects -------------------------------------------------

    def _seal(self, payload: Mapping, keys: Mapping[str, X25519PublicKey]) -> str:
        if self.system_id not in keys:
            raise ValueError(f"recipient keys must include the system recipient {self.system_id!r}")
        record = encrypt_record(canonical_json(payload), keys)
        return self.blocks.put_object(record.to_bytes())

    def _open(self, cid: str, private_key: Optional[X25519PrivateKey] = None) -> dict:
        record = EncryptedRecord.from_bytes(self.blocks.get_object(cid))
        key = private_key or self.keyring.private_key(self.system_id)
        try:
            return json.loads(decrypt_record(record, key))
        except WrongKey as exc:
            raise DecryptFailure(f"cannot open {cid}: {exc}") from exc

    def recipient_keys(self, extra: Iterable[str] = ()) -> dict[str, X25519PublicKey]:
        ids = [self.system_id] + [r for r in extra if r and r in self.keyring]
        return self.keyring.recipients(ids)

    # -- documents ---------------------------------------------------------

    def read_document(self, cid: str, private_key: Optional[X25519PrivateKey] = None) -> PatientDocument:
        return PatientDocument.from_dict(self._open(cid, private_key))

    def load_document(self, peer_id: str, device_type: DeviceType | str) -> Optional[PatientDocument]:
        key = name_key(peer_id, device_type)
        if key not in self.names:
            return None
        return self.read_document(self.names.resolve_name(key))

    def append_observation(
        self,
        peer_id: str,
        device_type: DeviceType | str,
        obs: HarmonizedObservation,
        keys: Mapping[str, X25519PublicKey],
    ) -> str:
        return self.append_observations(peer_id, device_type, [obs], keys)

    def append_observations(
        self,
        peer_id: str,
        device_type: DeviceType | str,
        observations: Iterable[HarmonizedObservation],
        keys: Mapping[str, X25519PublicKey],
    ) -> str:
        """Append in the given order under one read-modify-publish cycle."""
        device_type = DeviceType.parse(device_type)
        key = name_key(peer_id, device_type)
        with self.names.exclusive(key):
            doc = self.load_document(peer_id, device_type)
            if doc is None:
                doc = PatientDocument(uuid.uuid4().hex, peer_id, device_type)
            for obs in observations:
                doc.insert(obs, self.regression_tolerance)
            cid = self._seal(doc.to_dict(), keys)
            self.names.publish_name(key, cid)
        self._link(peer_id, device_type.value, cid)
        return cid

    # -- patient folder ----------------------------------------------------

    def _link(self, peer_id: str, entry: str, cid: str) -> str:
        with self.names.exclusive(peer_id):
            folder = self.read_folder_of(peer_id) or {"peer_id": peer_id, "links": {}}
            folder["links"][entry] = cid
            folder_cid = self.blocks.put_block(canonical_json(folder))
            self.names.publish_name(peer_id, folder_cid)
        return folder_cid

    def read_folder(self, cid: str) -> dict:
        return json.loads(self.blocks.get_block(cid))

    def read_folder_of(self, peer_id: str) -> Optional[dict]:
        if peer_id not in self.names:
            return None
        return self.read_folder(self.names.resolve_name(peer_id))

    def has_patient_data(self, peer_id: str) -> bool:
        return peer_id in self.names

    def device_types_of(self, peer_id: str) -> list[DeviceType]:
        folder = self.read_folder_of(peer_id) or {"links": {}}
        return sorted(
            (DeviceType(k) for k in folder["links"] if k != PROFILE), key=lambda d: d.value
        )

    # -- profiles ----------------------------------------------------------

    def put_profile(
        self, profile: PatientProfile, keys: Mapping[str, X25519PublicKey], replace: bool = False
    ) -> str:
        """Register a profile. Re-registering an identical profile is a no-op;
        a different profile under the same peer id is a collision unless ``replace``."""
        key = name_key(profile.peer_id, PROFILE)
        with self.names.exclusive(key):
            if key in self.names and not replace:
                existing = PatientProfile.from_dict(self._open(self.names.resolve_name(key)))
                if existing.to_dict() != profile.to_dict():
                    raise PeerIdCollision(
                        f"peer id {profile.peer_id[:12]}... is already registered to another profile"
                    )
                return self.names.resolve_name(key)
            cid = self._seal(profile.to_dict(), keys)
            self.names.publish_name(key, cid)
        self._link(profile.peer_id, PROFILE, cid)
        return cid

    def read_profile(self, cid: str) -> PatientProfile:
        return PatientProfile.from_dict(self._open(cid))

    def get_profile(self, peer_id: str) -> PatientProfile:
        key = name_key(peer_id, PROFILE)
        try:
            cid = self.names.resolve_name(key)
        except NameNotFound:
            raise UnknownPatient(peer_id) from None
        return PatientProfile.from_dict(self._open(cid))

    def patient_ids(self) -> list[str]:
        suffix = "/" + PROFILE
        return sorted(k[: -len(suffix)] for k in self.names.keys() if k.endswith(suffix))
