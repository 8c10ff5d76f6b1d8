"""Participant lifecycle: registration, screening, consent, onboarding.

Personal identifiers (email, signature) live only here, in a directory kept
separate from the response streams; responses reference participants solely
by their random 22-character id, which keeps the de-identification boundary
auditable with a byte-level scan.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import os
import re
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .timeutil import format_utc_ms

PENDING = "pending"
ELIGIBLE = "eligible"
INELIGIBLE = "ineligible"

_EMAIL_RE = re.compile(r"^[^@\s]+@[^@\s]+\.[^@\s]+$")
_BASE62 = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
RANDOM_ID_LEN = 22
MIN_PASSWORD_LEN = 10


class RegistryError(Exception):
    code = "registryError"


class DuplicateEmailError(RegistryError):
    code = "duplicateEmail"


class WeakPasswordError(RegistryError):
    code = "weakPassword"


class InvalidEmailError(RegistryError):
    code = "invalidEmail"


class UnknownParticipantError(RegistryError):
    code = "unknownParticipant"


class AlreadyScreenedError(RegistryError):
    code = "alreadyScreened"


class NotEligibleError(RegistryError):
    code = "notEligible"


class AlreadyConsentedError(RegistryError):
    code = "alreadyConsented"


class NoConsentError(RegistryError):
    code = "noConsent"


def _base62_id(n_bytes: int = 16) -> str:
    value = int.from_bytes(secrets.token_bytes(n_bytes), "big")
    digits = []
    while value:
        value, rem = divmod(value, 62)
        digits.append(_BASE62[rem])
    text = "".join(reversed(digits))
    return text.rjust(RANDOM_ID_LEN, "0")


@dataclass(frozen=True)
class Predicate:
    """One declarative eligibility check over onboarding-style answers."""

    field: str
    op: str  # eq | ne | gt | ge | lt | le | in
    value: Any

    def describe(self) -> str:
        symbol = {"eq": "==", "ne": "!=", "gt": ">", "ge": ">=",
                  "lt": "<", "le": "<=", "in": "in"}[self.op]
        return f"{self.field} {symbol} {self.value!r}"

    def evaluate(self, answers: Mapping[str, Any]) -> bool:
        if self.field not in answers:
            return False
        answer = answers[self.field]
        if self.op == "in":
            options = self.value if isinstance(self.value, (list, tuple)) else [self.value]
            return answer in options
        if self.op in ("eq", "ne"):
            same = answer == self.value
            return same if self.op == "eq" else not same
        # ordering comparators coerce both sides to float; uncomparable
        # answers simply fail the predicate
        try:
            left, right = float(answer), float(self.value)
        except (TypeError, ValueError):
            return False
        return {"gt": left > right, "ge": left >= right,
                "lt": left < right, "le": left <= right}[self.op]


def predicates_from_json(doc: Any) -> list[Predicate]:
    if not isinstance(doc, list):
        raise ValueError("eligibility rules must be a list")
    rules = []
    for entry in doc:
        op = entry.get("op")
        if op not in ("eq", "ne", "gt", "ge", "lt", "le", "in"):
            raise ValueError(f"unknown comparator {op!r}")
        rules.append(Predicate(field=str(entry["field"]), op=op, value=entry["value"]))
    return rules


@dataclass
class Participant:
    random_id: str
    email: str
    credential_hash: str
    eligibility: str = PENDING
    failed_predicates: list[str] = field(default_factory=list)
    consent: dict[str, Any] | None = None
    onboarding: dict[str, Any] | None = None
    push_token: str | None = None

    @property
    def consented(self) -> bool:
        return self.consent is not None


class ParticipantRegistry:
    """Single-writer participant store persisted under ``<root>/registry``."""

    def __init__(self, root: Path | str, pbkdf2_iterations: int = 100_000):
        self.dir = Path(root) / "registry"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._path = self.dir / "participants.json"
        self._iterations = pbkdf2_iterations
        self._lock = threading.Lock()
        self._participants: dict[str, Participant] = {}
        self._by_email: dict[str, str] = {}
        self._load()

    # -- persistence ---------------------------------------------------------

    def _load(self) -> None:
        if not self._path.exists():
            return
        doc = json.loads(self._path.read_text("utf-8"))
        for entry in doc.get("participants", []):
            participant = Participant(
                random_id=entry["randomId"],
                email=entry["email"],
                credential_hash=entry["credentialHash"],
                eligibility=entry.get("eligibility", PENDING),
                failed_predicates=list(entry.get("failedPredicates", [])),
                consent=entry.get("consent"),
                onboarding=entry.get("onboarding"),
                push_token=entry.get("pushToken"),
            )
            self._participants[participant.random_id] = participant
            self._by_email[participant.email.lower()] = participant.random_id

    def _save_locked(self) -> None:
        doc = {"participants": [
            {
                "randomId": p.random_id,
                "email": p.email,
                "credentialHash": p.credential_hash,
                "eligibility": p.eligibility,
                "failedPredicates": p.failed_predicates,
                "consent": p.consent,
                "onboarding": p.onboarding,
                "pushToken": p.push_token,
            }
            for p in self._participants.values()
        ]}
        tmp = self._path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, ensure_ascii=False, indent=2)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._path)

    # -- lifecycle -----------------------------------------------------------

    def register(self, email: str, password: str) -> Participant:
        if not isinstance(email, str) or not _EMAIL_RE.match(email):
            raise InvalidEmailError(f"not a usable email address: {email!r}")
        if not isinstance(password, str) or len(password) < MIN_PASSWORD_LEN:
            raise WeakPasswordError(f"password must be at least {MIN_PASSWORD_LEN} characters")
        with self._lock:
            if email.lower() in self._by_email:
                raise DuplicateEmailError("email already registered")
            random_id = _base62_id()
            while random_id in self._participants:
                random_id = _base62_id()
            participant = Participant(
                random_id=random_id,
                email=email,
                credential_hash=self._hash_password(password),
            )
            self._participants[random_id] = participant
            self._by_email[email.lower()] = random_id
            self._save_locked()
            return participant

    def screen(self, participant_id: str, answers: Mapping[str, Any],
               rules: list[Predicate]) -> Participant:
        with self._lock:
            participant = self._get_locked(participant_id)
            if participant.eligibility != PENDING:
                raise AlreadyScreenedError(
                    f"participant already screened: {participant.eligibility}")
            failing = [rule.describe() for rule in rules if not rule.evaluate(answers)]
            participant.eligibility = ELIGIBLE if not failing else INELIGIBLE
            participant.failed_predicates = failing
            self._save_locked()
            return participant

    def record_consent(self, participant_id: str, signature_name: str,
                       document_version: str, now_ms: int) -> Participant:
        with self._lock:
            participant = self._get_locked(participant_id)
            if participant.eligibility != ELIGIBLE:
                raise NotEligibleError(
                    f"participant is {participant.eligibility}, not eligible")
            if participant.consent is not None:
                raise AlreadyConsentedError("consent already recorded")
            participant.consent = {
                "signedAt": format_utc_ms(now_ms),
                "documentVersion": str(document_version),
                "signatureName": str(signature_name),
            }
            self._save_locked()
            self._write_receipt_locked(participant)
            return participant

    def record_onboarding(self, participant_id: str,
                          answers: Mapping[str, Any]) -> Participant:
        with self._lock:
            participant = self._get_locked(participant_id)
            if participant.consent is None:
                raise NoConsentError("onboarding requires recorded consent")
            participant.onboarding = dict(answers)
            self._save_locked()
            return participant

    def register_push_token(self, participant_id: str, token: str) -> Participant:
        with self._lock:
            participant = self._get_locked(participant_id)
            if participant.consent is None:
                raise NoConsentError("push registration requires recorded consent")
            participant.push_token = str(token)
            self._save_locked()
            return participant

    # -- queries -------------------------------------------------------------

    def get(self, participant_id: str) -> Participant:
        with self._lock:
            return self._get_locked(participant_id)

    def find(self, participant_id: str) -> Participant | None:
        with self._lock:
            return self._participants.get(participant_id)

    def all_participants(self) -> list[Participant]:
        with self._lock:
            return list(self._participants.values())

    def authenticate(self, email: str, password: str) -> Participant | None:
        with self._lock:
            pid = self._by_email.get((email or "").lower())
            participant = self._participants.get(pid) if pid else None
        if participant and self._verify_password(password, participant.credential_hash):
            return participant
        return None

    def consent_receipt(self, participant_id: str) -> tuple[str, str]:
        """(receipt text, content hash) of a participant's consent copy."""
        participant = self.get(participant_id)
        if participant.consent is None:
            raise NoConsentError("no consent on file")
        return _receipt_text(participant)

    # -- internals -----------------------------------------------------------

    def _get_locked(self, participant_id: str) -> Participant:
        participant = self._participants.get(participant_id)
        if participant is None:
            raise UnknownParticipantError(f"no participant {participant_id!r}")
        return participant

    def _write_receipt_locked(self, participant: Participant) -> Path:
        receipts = self.dir / "consents"
        receipts.mkdir(exist_ok=True)
        text, _ = _receipt_text(participant)
        path = receipts / f"{participant.random_id}.txt"
        path.write_text(text, "utf-8")
        return path

    def _hash_password(self, password: str) -> str:
        salt = secrets.token_bytes(16)
        digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt,
                                     self._iterations)
        return f"pbkdf2-sha256${self._iterations}${salt.hex()}${digest.hex()}"

    @staticmethod
    def _verify_password(password: str, stored: str) -> bool:
        try:
            scheme, iterations, salt_hex, digest_hex = stored.split("$")
            if scheme != "pbkdf2-sha256":
                return False
            digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"),
                                         bytes.fromhex(salt_hex), int(iterations))
            return hmac.compare_digest(digest.hex(), digest_hex)
        except (ValueError, TypeError):
            return False


def _receipt_text(participant: Participant) -> tuple[str, str]:
    consent = participant.consent or {}
    body = (
        "Study consent receipt\n"
        f"Participant: {participant.random_id}\n"
        f"Document version: {consent.get('documentVersion', '')}\n"
        f"Signed by: {consent.get('signatureName', '')}\n"
        f"Signed at: {consent.get('signedAt', '')}\n"
    )
    content_hash = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return body + f"Content hash: {content_hash}\n", content_hash
