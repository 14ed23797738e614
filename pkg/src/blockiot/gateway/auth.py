from __future__ import annotations

import hashlib
import hmac
import secrets
from pathlib import Path


class DeviceAuth:
    """Per-device pre-shared tokens derived as HMAC(secret, "<peer_id>/<device_type>")."""

    def __init__(self, secret: bytes, enforce: bool = True):
        self.secret = secret
        self.enforce = enforce

    @classmethod
    def from_file(cls, path: str | Path, enforce: bool = True) -> "DeviceAuth":
        """Load the gateway secret, creating one on first use."""
        path = Path(path)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(secrets.token_hex(32), "ascii")
            path.chmod(0o600)
        return cls(bytes.fromhex(path.read_text("ascii").strip()), enforce)

    def token_for(self, peer_id: str, device_type: str) -> str:
        device_type = getattr(device_type, "value", device_type)
        msg = f"{peer_id}/{device_type}".encode("utf-8")
        return hmac.new(self.secret, msg, hashlib.sha256).hexdigest()[:32]

    def verify(self, peer_id: str, device_type: str, token: str | None) -> bool:
        if not self.enforce:
            return True
        if not token:
            return False
        return hmac.compare_digest(self.token_for(peer_id, device_type), token)
