from __future__ import annotations

import hashlib
import re
from datetime import date, datetime

from blockiot.errors import EmptyName, InvalidDate

_PEER_ID_RE = re.compile(r"^[0-9a-f]{64}$")


def _normalize_name(part: str, which: str) -> str:
    if not isinstance(part, str):
        raise EmptyName(f"{which} name must be a string")
    norm = " ".join(part.split()).lower()
    if not norm:
        raise EmptyName(f"{which} name is empty")
    return norm


def _normalize_dob(dob: date | str) -> str:
    if isinstance(dob, datetime):
        dob = dob.date()
    if isinstance(dob, date):
        return dob.isoformat()
    if isinstance(dob, str):
        try:
            return date.fromisoformat(dob.strip()).isoformat()
        except ValueError as exc:
            raise InvalidDate(f"not a calendar date: {dob!r}") from exc
    raise InvalidDate(f"unsupported date of birth {dob!r}")


def canonical_biometrics(first: str, last: str, dob: date | str) -> str:
    return "|".join(
        (_normalize_name(first, "first"), _normalize_name(last, "last"), _normalize_dob(dob))
    )


def derive_peer_id(first: str, last: str, dob: date | str) -> str:
    """Derive the patient's peer id from first name, last name and date of birth.

    Names are trimmed, inner whitespace collapsed and lowercased; the date is
    rendered as ISO-8601. The result is the SHA-256 hex digest of
    ``first|last|YYYY-MM-DD``.
    """
    return hashlib.sha256(canonical_biometrics(first, last, dob).encode("utf-8")).hexdigest()


def is_peer_id(value: object) -> bool:
    return isinstance(value, str) and bool(_PEER_ID_RE.match(value))
