from blockiot.store.blocks import FileBlockStore, MemoryBlockStore, cid_for, is_cid
from blockiot.store.crypto import EncryptedRecord, Keyring, decrypt_record, encrypt_record
from blockiot.store.documents import DocumentStore, PatientDocument
from blockiot.store.names import NameRecord, NameStore, name_key

__all__ = [
    "DocumentStore", "EncryptedRecord", "FileBlockStore", "Keyring", "MemoryBlockStore",
    "NameRecord", "NameStore", "PatientDocument", "cid_for", "decrypt_record",
    "encrypt_record", "is_cid", "name_key",
]
