"""API key credentials for the HTTP surface.

Keys live in a local JSON credential store. Requests present
``X-Api-Key: <keyId>.<secret>``; comparison is constant-time and the secret
is masked from reprs so it cannot leak into logs.
"""
from __future__ import annotations

import hmac
import json
from dataclasses import dataclass, field
from pathlib import Path


class KeyStoreError(Exception):
    pass


@dataclass(frozen=True)
class ApiKey:
    key_id: str
    secret: str = field(repr=False)
    rate_per_hour: int = 60
    enabled: bool = True

    def __repr__(self) -> str:  # keep the secret out of logs and tracebacks
        return (f"ApiKey(key_id={self.key_id!r}, secret='***', "
                f"rate_per_hour={self.rate_per_hour}, enabled={self.enabled})")


class KeyStore:
    def __init__(self, keys: list[ApiKey]):
        self._keys = {k.key_id: k for k in keys}

    @classmethod
    def load(cls, path: Path | str) -> "KeyStore":
        try:
            doc = json.loads(Path(path).read_text("utf-8"))
        except OSError as exc:
            raise KeyStoreError(f"cannot read key store {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise KeyStoreError(f"key store {path} is not valid JSON: {exc}") from exc
        entries = doc.get("keys")
        if not isinstance(entries, list):
            raise KeyStoreError(f"key store {path} must contain a 'keys' list")
        keys = []
        for entry in entries:
            try:
                keys.append(ApiKey(
                    key_id=str(entry["keyId"]),
                    secret=str(entry["secret"]),
                    rate_per_hour=int(entry.get("ratePerHour", 60)),
                    enabled=bool(entry.get("enabled", True)),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise KeyStoreError(f"bad key entry in {path}: {exc}") from exc
        return cls(keys)

    def lookup(self, key_id: str) -> ApiKey | None:
        return self._keys.get(key_id)

    def authenticate(self, header_value: str | None) -> ApiKey | None:
        """Resolve an ``X-Api-Key`` header to an enabled key, or None."""
        if not header_value or "." not in header_value:
            return None
        key_id, _, secret = header_value.partition(".")
        key = self._keys.get(key_id)
        if key is None or not key.enabled:
            return None
        if not hmac.compare_digest(key.secret.encode(), secret.encode()):
            return None
        return key
