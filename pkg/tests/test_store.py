import hashlib
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from blockiot.core.model import DeviceType, HarmonizedObservation, ObservedValue, ValueStatus
from blockiot.errors import (
    CorruptBlock,
    DecryptFailure,
    NameNotFound,
    NoRecipients,
    NotFound,
    PeerIdCollision,
    StorageFull,
    UnknownCid,
    UnknownPatient,
    WrongKey,
)
from blockiot.store import (
    DocumentStore,
    EncryptedRecord,
    FileBlockStore,
    Keyring,
    MemoryBlockStore,
    NameStore,
    cid_for,
    decrypt_record,
    encrypt_record,
    is_cid,
)

from conftest import T0

EMPTY_CID = "b-e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


@pytest.fixture(params=["memory", "file"])
def blocks(request, tmp_path):
    if request.param == "memory":
        return MemoryBlockStore(block_limit=1024)
    return FileBlockStore(tmp_path / "blocks", block_limit=1024)


# -- blocks ------------------------------------------------------------------


def test_empty_cid_golden(blocks):
    assert blocks.put_block(b"") == EMPTY_CID
    assert blocks.get_block(EMPTY_CID) == b""
    assert is_cid(EMPTY_CID) and not is_cid("b-xyz")


def test_put_is_idempotent(blocks):
    a = blocks.put_block(b"hello")
    b = blocks.put_block(b"hello")
    assert a == b == "b-" + hashlib.sha256(b"hello").hexdigest()
    assert blocks.block_count == 1


def test_not_found(blocks):
    with pytest.raises(NotFound):
        blocks.get_block(cid_for(b"never stored"))


def test_chunked_object_roundtrip(blocks):
    data = b"".join(hashlib.sha256(bytes([i])).digest() for i in range(160))  # 5120 distinct bytes
    cid = blocks.put_object(data)
    assert blocks.get_object(cid) == data
    assert blocks.block_count == 6  # 5 chunks + manifest
    with pytest.raises(ValueError):
        blocks.put_block(data)


def test_bit_flip_detected_memory():
    store = MemoryBlockStore()
    cid = store.put_block(b"payload")
    store._blocks[cid] = b"paxload"
    with pytest.raises(CorruptBlock):
        store.get_block(cid)


def test_bit_flip_detected_file(tmp_path):
    store = FileBlockStore(tmp_path)
    cid = store.put_block(b"payload")
    path = store.path_for(cid)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptBlock):
        store.get_block(cid)


def test_capacity(tmp_path):
    store = MemoryBlockStore(capacity_bytes=10)
    store.put_block(b"12345")
    with pytest.raises(StorageFull):
        store.put_block(b"abcdefg")


def test_file_store_counts_survive_reopen(tmp_path):
    FileBlockStore(tmp_path).put_block(b"x")
    assert FileBlockStore(tmp_path).block_count == 1


@settings(max_examples=50)
@given(st.binary(max_size=3000))
def test_object_roundtrip_any_size(data):
    store = MemoryBlockStore(block_limit=512)
    cid = store.put_object(data)
    assert store.get_object(cid) == data


# -- names -------------------------------------------------------------------


def test_name_sequence_and_unknown_cid(clock):
    blocks = MemoryBlockStore()
    names = NameStore(blocks, clock=clock)
    c1, c2 = blocks.put_block(b"1"), blocks.put_block(b"2")
    assert names.publish_name("p/ekg", c1).sequence == 1
    rec = names.publish_name("p/ekg", c2)
    assert (rec.sequence, rec.current, rec.updated_at) == (2, c2, T0)
    assert names.resolve_name("p/ekg") == c2
    with pytest.raises(UnknownCid):
        names.publish_name("p/ekg", cid_for(b"absent"))
    with pytest.raises(NameNotFound):
        names.resolve_name("q/ekg")


def test_name_journal_replay(tmp_path, clock):
    blocks = FileBlockStore(tmp_path / "b")
    names = NameStore(blocks, tmp_path / "names.journal", clock=clock)
    cids = [blocks.put_block(bytes([i])) for i in range(5)]
    for c in cids:
        names.publish_name("k", c)
    names.close()
    with open(tmp_path / "names.journal", "a") as fh:
        fh.write("k\t99\tb-torn")  # partial write is ignored
    again = NameStore(blocks, tmp_path / "names.journal", clock=clock)
    assert again.record("k").sequence == 5
    assert again.resolve_name("k") == cids[-1]


# -- crypto ------------------------------------------------------------------


def test_hybrid_encryption_two_recipients():
    ring = Keyring()
    keys = {r: ring.ensure(r) for r in ("system", "ehr-1")}
    rec = encrypt_record(b"secret", keys)
    assert rec.recipient_ids == ("ehr-1", "system")
    for r in keys:
        assert decrypt_record(rec, ring.private_key(r)) == b"secret"
    with pytest.raises(WrongKey):
        decrypt_record(rec, X25519PrivateKey.generate())
    again = EncryptedRecord.from_bytes(rec.to_bytes())
    assert decrypt_record(again, ring.private_key("system")) == b"secret"


def test_no_recipients():
    with pytest.raises(NoRecipients):
        encrypt_record(b"x", {})


def test_ciphertexts_are_fresh():
    pub = Keyring().ensure("system")
    a, b = encrypt_record(b"same", {"system": pub}), encrypt_record(b"same", {"system": pub})
    assert a.ciphertext != b.ciphertext and a.to_bytes() != b.to_bytes()


def test_keyring_persists(tmp_path):
    ring = Keyring(tmp_path / "keys.json")
    pub = ring.ensure("system")
    rec = encrypt_record(b"z", {"system": pub})
    assert decrypt_record(rec, Keyring(tmp_path / "keys.json").private_key("system")) == b"z"


# -- documents ---------------------------------------------------------------


def _obs(peer, minutes, bpm=70, device=DeviceType.HEART_RATE):
    return HarmonizedObservation(
        peer, device, "hr-monitor-v1", T0 + timedelta(minutes=minutes),
        (ObservedValue("bpm", "bpm", bpm, ValueStatus.WITHIN_LIMITS),),
    )


@pytest.fixture
def docs(clock):
    blocks = MemoryBlockStore()
    ring = Keyring()
    ring.ensure("ehr-1")
    return DocumentStore(blocks, NameStore(blocks, clock=clock), ring)


def test_documents_sorted_and_stable(docs):
    keys = docs.recipient_keys(["ehr-1"])
    p = "a" * 64
    docs.append_observation(p, "heart_rate", _obs(p, 5, 1), keys)
    docs.append_observation(p, "heart_rate", _obs(p, 0, 2), keys)
    docs.append_observation(p, "heart_rate", _obs(p, 5, 3), keys)
    doc = docs.load_document(p, DeviceType.HEART_RATE)
    assert [o.value("bpm").value for o in doc.observations] == [2, 1, 3]
    assert [e.seq for e in doc.entries] == [1, 0, 2]
    assert doc.observations[0].warnings  # 5 min regression exceeds 60 s tolerance
    assert docs.device_types_of(p) == [DeviceType.HEART_RATE]


def test_regression_warning(docs):
    keys = docs.recipient_keys()
    p = "b" * 64
    docs.append_observation(p, "heart_rate", _obs(p, 10), keys)
    docs.append_observation(p, "heart_rate", _obs(p, 0), keys)
    first = docs.load_document(p, "heart_rate").observations[0]
    assert first.warnings and first.warnings[0].startswith("timestamp regression")


def test_old_versions_remain_readable(docs):
    keys = docs.recipient_keys()
    p = "c" * 64
    v1 = docs.append_observation(p, "heart_rate", _obs(p, 0), keys)
    v2 = docs.append_observation(p, "heart_rate", _obs(p, 1), keys)
    assert v1 != v2
    assert len(docs.read_document(v1).entries) == 1
    assert len(docs.read_document(v2).entries) == 2
    assert docs.read_folder_of(p)["links"]["heart_rate"] == v2


def test_physician_can_open_documents(docs):
    keys = docs.recipient_keys(["ehr-1"])
    p = "d" * 64
    cid = docs.append_observation(p, "heart_rate", _obs(p, 0), keys)
    doc = docs.read_document(cid, docs.keyring.private_key("ehr-1"))
    assert doc.peer_id == p
    cid = docs.append_observation(p, "heart_rate", _obs(p, 1), docs.recipient_keys())
    with pytest.raises(DecryptFailure):
        docs.read_document(cid, docs.keyring.private_key("ehr-1"))


def test_profiles_and_collision(docs, wendy):
    keys = docs.recipient_keys(["ehr-1"])
    cid = docs.put_profile(wendy, keys)
    assert docs.put_profile(wendy, keys) == cid
    assert docs.get_profile(wendy.peer_id) == wendy
    assert docs.patient_ids() == [wendy.peer_id]
    import dataclasses

    other = dataclasses.replace(wendy, medications=("Aspirin",))
    with pytest.raises(PeerIdCollision):
        docs.put_profile(other, keys)
    docs.put_profile(other, keys, replace=True)
    assert docs.get_profile(wendy.peer_id).medications == ("Aspirin",)
    with pytest.raises(UnknownPatient):
        docs.get_profile("0" * 64)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=15))
def test_document_order_property(offsets):
    blocks = MemoryBlockStore()
    docs = DocumentStore(blocks, NameStore(blocks), Keyring(), regression_tolerance=timedelta(days=1))
    p = "e" * 64
    for i, m in enumerate(offsets):
        docs.append_observation(p, "heart_rate", _obs(p, m, i), docs.recipient_keys())
    got = [o.value("bpm").value for o in docs.load_document(p, "heart_rate").observations]
    oracle = [i for _, i in sorted((m, i) for i, m in enumerate(offsets))]
    assert got == oracle
