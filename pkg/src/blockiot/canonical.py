"""Canonical JSON encoding and digests.

Content addressing and ledger hashes both depend on a byte-stable encoding:
sorted keys, no insignificant whitespace, UTF-8, no NaN/Infinity.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_of(obj: Any) -> str:
    return sha256_hex(canonical_json(obj))


ZERO_DIGEST = "0" * 64
