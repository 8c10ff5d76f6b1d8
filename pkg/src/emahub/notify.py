"""Participant notifications: survey reminders on a daily plan and
condition-triggered alerts, dispatched through a pluggable push provider.

Scheduled rules spread ``timesPerDay`` instants evenly across the waking
window, each nudged by deterministic jitter seeded from (participant, date)
so re-planning is reproducible. Conditional rules fire when the latest
reading at a participant's current location crosses a temperature threshold,
subject to a per-(rule, participant) cooldown. Every dispatch attempt lands
in the dispatches stream, also on provider failure.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
import time as _time
from dataclasses import dataclass
from datetime import date as date_type
from datetime import datetime, time, timezone
from pathlib import Path
from typing import Any, Mapping
from zoneinfo import ZoneInfo

import requests

from .registry import ParticipantRegistry
from .store import StreamStore
from .timeutil import format_utc_ms, parse_utc_ms

log = logging.getLogger(__name__)

SCHEDULED = "scheduled"
CONDITIONAL = "conditional"

ABOVE = "above"
BELOW = "below"

JITTER_FRACTION = 0.1
RETRY_BACKOFF_MINUTES = (1, 2, 4)
PRESENCE_WINDOW_MINUTES = 120


class NotificationError(Exception):
    pass


class InvalidRuleError(NotificationError):
    pass


class NoPushTokenError(NotificationError):
    pass


class ProviderError(NotificationError):
    """The push provider rejected or failed to deliver a message."""


# ---------------------------------------------------------------------------
# Rules


@dataclass(frozen=True)
class ScheduledSpec:
    times_per_day: int
    waking_start: time
    waking_end: time
    timezone: str


@dataclass(frozen=True)
class ConditionalSpec:
    location_label: str
    temp_threshold_c: float
    direction: str  # above | below
    cooldown_minutes: float


@dataclass(frozen=True)
class NotificationRule:
    rule_id: str
    kind: str  # scheduled | conditional
    message: str
    enabled: bool = True
    scheduled: ScheduledSpec | None = None
    conditional: ConditionalSpec | None = None


def _parse_wall_time(text: str) -> time:
    hh, _, mm = text.partition(":")
    return time(int(hh), int(mm))


def rule_from_dict(doc: Mapping[str, Any]) -> NotificationRule:
    kind = doc.get("kind")
    rule = NotificationRule(
        rule_id=str(doc["ruleId"]),
        kind=str(kind),
        message=str(doc.get("message", "")),
        enabled=bool(doc.get("enabled", True)),
        scheduled=None,
        conditional=None,
    )
    if kind == SCHEDULED:
        spec = doc.get("scheduled") or {}
        rule = NotificationRule(
            rule_id=rule.rule_id, kind=kind, message=rule.message,
            enabled=rule.enabled,
            scheduled=ScheduledSpec(
                times_per_day=int(spec["timesPerDay"]),
                waking_start=_parse_wall_time(str(spec["wakingStart"])),
                waking_end=_parse_wall_time(str(spec["wakingEnd"])),
                timezone=str(spec["timezone"]),
            ))
    elif kind == CONDITIONAL:
        spec = doc.get("conditional") or {}
        rule = NotificationRule(
            rule_id=rule.rule_id, kind=kind, message=rule.message,
            enabled=rule.enabled,
            conditional=ConditionalSpec(
                location_label=str(spec["locationLabel"]),
                temp_threshold_c=float(spec["tempThresholdC"]),
                direction=str(spec["direction"]),
                cooldown_minutes=float(spec.get("cooldownMinutes", 0)),
            ))
    else:
        raise InvalidRuleError(f"rule {doc.get('ruleId')!r}: unknown kind {kind!r}")
    validate_rule(rule)
    return rule


def validate_rule(rule: NotificationRule) -> None:
    if rule.kind == SCHEDULED:
        spec = rule.scheduled
        if spec is None:
            raise InvalidRuleError(f"{rule.rule_id}: missing scheduled block")
        if spec.times_per_day < 1:
            raise InvalidRuleError(f"{rule.rule_id}: timesPerDay must be >= 1")
        if spec.waking_start >= spec.waking_end:
            raise InvalidRuleError(f"{rule.rule_id}: waking window is empty")
        try:
            ZoneInfo(spec.timezone)
        except Exception as exc:
            raise InvalidRuleError(f"{rule.rule_id}: unknown timezone "
                                   f"{spec.timezone!r}") from exc
    elif rule.kind == CONDITIONAL:
        spec = rule.conditional
        if spec is None:
            raise InvalidRuleError(f"{rule.rule_id}: missing conditional block")
        if spec.direction not in (ABOVE, BELOW):
            raise InvalidRuleError(f"{rule.rule_id}: direction must be above|below")
        if spec.cooldown_minutes < 0:
            raise InvalidRuleError(f"{rule.rule_id}: cooldown must be >= 0")
        if not spec.location_label:
            raise InvalidRuleError(f"{rule.rule_id}: empty locationLabel")
    else:
        raise InvalidRuleError(f"{rule.rule_id}: unknown kind {rule.kind!r}")


def load_rules_file(path: Path | str) -> list[NotificationRule]:
    doc = json.loads(Path(path).read_text("utf-8"))
    entries = doc.get("rules")
    if not isinstance(entries, list):
        raise InvalidRuleError(f"{path}: expected a top-level 'rules' list")
    return [rule_from_dict(entry) for entry in entries]


# ---------------------------------------------------------------------------
# Planning


def plan_day(rule: NotificationRule, day: date_type, participant_id: str,
             tz_override: str | None = None) -> list[int]:
    """Dispatch instants (epoch ms) for one participant and local date.

    The waking window is cut into ``timesPerDay`` equal slots; each instant
    sits at its slot midpoint plus at most 10% of a slot of seeded jitter, so
    the whole plan stays inside the window and is identical on every re-plan.
    """
    if not rule.enabled or rule.kind != SCHEDULED or rule.scheduled is None:
        raise InvalidRuleError(f"{rule.rule_id}: not an enabled scheduled rule")
    validate_rule(rule)
    spec = rule.scheduled
    tz = ZoneInfo(tz_override or spec.timezone)
    start = datetime.combine(day, spec.waking_start, tzinfo=tz)
    end = datetime.combine(day, spec.waking_end, tzinfo=tz)
    start_ms = int(start.astimezone(timezone.utc).timestamp() * 1000)
    end_ms = int(end.astimezone(timezone.utc).timestamp() * 1000)
    if end_ms <= start_ms:
        raise InvalidRuleError(f"{rule.rule_id}: waking window collapsed on {day}")
    slot = (end_ms - start_ms) / spec.times_per_day
    rng = random.Random(_jitter_seed(participant_id, day))
    instants = []
    for i in range(spec.times_per_day):
        midpoint = start_ms + (i + 0.5) * slot
        jitter = rng.uniform(-JITTER_FRACTION, JITTER_FRACTION) * slot
        instants.append(int(midpoint + jitter))
    return instants


def _jitter_seed(participant_id: str, day: date_type) -> int:
    digest = hashlib.sha256(f"{participant_id}|{day.isoformat()}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Conditional evaluation


def evaluate_conditional(rule: NotificationRule,
                         latest_readings_by_location: Mapping[str, Mapping[str, Any]],
                         participant_presence: Mapping[str, str],
                         now_ms: int,
                         last_dispatch_ms: Mapping[tuple[str, str], int],
                         ) -> list[str]:
    """Participants the rule should fire for right now.

    A participant qualifies when present at the rule's location, the
    location's latest reading crosses the threshold in the rule's direction,
    and no dispatch for this (rule, participant) happened within the
    cooldown.
    """
    if not rule.enabled or rule.kind != CONDITIONAL or rule.conditional is None:
        return []
    spec = rule.conditional
    reading = latest_readings_by_location.get(spec.location_label)
    if reading is None:
        return []
    temp = float(reading["dryBulbTempC"])
    crossed = temp > spec.temp_threshold_c if spec.direction == ABOVE \
        else temp < spec.temp_threshold_c
    if not crossed:
        return []
    cooldown_ms = spec.cooldown_minutes * 60_000
    fired = []
    for participant_id, location in participant_presence.items():
        if location != spec.location_label:
            continue
        last = last_dispatch_ms.get((rule.rule_id, participant_id))
        if last is not None and now_ms - last < cooldown_ms:
            continue
        fired.append(participant_id)
    return sorted(fired)


# ---------------------------------------------------------------------------
# Clock and providers


class SystemClock:
    def now_ms(self) -> int:
        return int(_time.time() * 1000)

    def sleep(self, seconds: float) -> None:
        _time.sleep(seconds)


class ManualClock:
    """Deterministic clock for simulations; sleep() advances it instantly."""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms

    def now_ms(self) -> int:
        return self._now

    def sleep(self, seconds: float) -> None:
        self._now += int(seconds * 1000)

    def set(self, now_ms: int) -> None:
        self._now = now_ms


class LogProvider:
    """Fallback provider: records sends in memory and to the log."""

    def __init__(self):
        self.sent: list[dict[str, str]] = []

    def send(self, participant_token: str, message: str, rule_id: str) -> str:
        self.sent.append({"participantToken": participant_token,
                          "message": message, "ruleId": rule_id})
        log.info("notification (log provider) rule=%s token=%s", rule_id,
                 participant_token[:6] + "...")
        return "ok"


class WebhookProvider:
    """POSTs each notification to a configured URL as JSON."""

    def __init__(self, url: str, timeout_seconds: float = 10.0):
        self.url = url
        self.timeout = timeout_seconds

    def send(self, participant_token: str, message: str, rule_id: str) -> str:
        try:
            response = requests.post(self.url, json={
                "participantToken": participant_token,
                "message": message,
                "ruleId": rule_id,
            }, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ProviderError(f"webhook unreachable: {exc}") from exc
        if response.status_code // 100 != 2:
            raise ProviderError(f"webhook returned {response.status_code}")
        return "ok"


# ---------------------------------------------------------------------------
# Dispatch


class Dispatcher:
    """Sends one notification and logs the outcome to the dispatches stream."""

    def __init__(self, store: StreamStore, provider, clock=None,
                 backoff_minutes: tuple[int, ...] = RETRY_BACKOFF_MINUTES):
        self.store = store
        self.provider = provider
        self.clock = clock or SystemClock()
        self.backoff_minutes = backoff_minutes

    def dispatch(self, rule_id: str, participant_id: str, push_token: str | None,
                 message: str, scheduled_for_ms: int | None = None) -> dict[str, Any]:
        """Invoke the provider (with bounded retries) and append the record.

        The record is appended whatever the provider outcome; only a missing
        push token aborts before any provider call.
        """
        if not push_token:
            raise NoPushTokenError(f"participant {participant_id} has no push token")
        triggered_ms = self.clock.now_ms()
        attempt_statuses: list[str] = []
        delivered_ms: int | None = None
        for attempt in range(1 + len(self.backoff_minutes)):
            try:
                status = self.provider.send(push_token, message, rule_id)
                attempt_statuses.append(status)
                delivered_ms = self.clock.now_ms()
                break
            except ProviderError as exc:
                attempt_statuses.append(f"error: {exc}")
                log.warning("dispatch %s/%s attempt %d failed: %s",
                            rule_id, participant_id, attempt + 1, exc)
                if attempt < len(self.backoff_minutes):
                    self.clock.sleep(self.backoff_minutes[attempt] * 60)
        body: dict[str, Any] = {
            "ruleId": rule_id,
            "participantId": participant_id,
            "triggeredAt": format_utc_ms(triggered_ms),
            "providerStatus": attempt_statuses[-1],
            "attempts": len(attempt_statuses),
            "attemptStatuses": attempt_statuses,
        }
        if scheduled_for_ms is not None:
            body["scheduledFor"] = format_utc_ms(scheduled_for_ms)
        if delivered_ms is not None:
            body["deliveredAt"] = format_utc_ms(delivered_ms)
        self.store.append("dispatches", triggered_ms, body)
        return body


# ---------------------------------------------------------------------------
# Scheduler


class NotificationScheduler:
    """Owns rule evaluation against the store, with restart-safe dedup.

    One scheduler loop evaluates rules; planned-dispatch dedup keys
    (ruleId, participantId, scheduledFor) and conditional cooldowns are
    rebuilt from the dispatches stream, so a crash between planning and
    dispatch never duplicates a notification.
    """

    def __init__(self, store: StreamStore, registry: ParticipantRegistry,
                 rules: list[NotificationRule], provider, clock=None,
                 presence_window_minutes: float = PRESENCE_WINDOW_MINUTES,
                 backoff_minutes: tuple[int, ...] = RETRY_BACKOFF_MINUTES):
        self.store = store
        self.registry = registry
        self.rules = list(rules)
        self.clock = clock or SystemClock()
        self.dispatcher = Dispatcher(store, provider, self.clock, backoff_minutes)
        self.presence_window_ms = presence_window_minutes * 60_000
        self._stop = threading.Event()
        self._dispatched_plan: set[tuple[str, str, str]] = set()
        self._last_dispatch: dict[tuple[str, str], int] = {}
        self._rules_lock = threading.Lock()
        self._reload_dispatch_state()

    def _reload_dispatch_state(self) -> None:
        for record in self.store.query_all("dispatches"):
            body = record.body
            key = (body["ruleId"], body["participantId"])
            triggered = parse_utc_ms(body["triggeredAt"])
            if key not in self._last_dispatch or self._last_dispatch[key] < triggered:
                self._last_dispatch[key] = triggered
            if "scheduledFor" in body:
                self._dispatched_plan.add((*key, body["scheduledFor"]))

    def reload_rules(self, rules: list[NotificationRule]) -> None:
        with self._rules_lock:
            self.rules = list(rules)
        log.info("notification rules reloaded: %d rule(s)", len(rules))

    # -- evaluation ----------------------------------------------------------

    def tick(self) -> list[dict[str, Any]]:
        """One evaluation pass at the clock's current instant."""
        now = self.clock.now_ms()
        with self._rules_lock:
            rules = list(self.rules)
        participants = [p for p in self.registry.all_participants()
                        if p.consented and p.push_token]
        dispatched: list[dict[str, Any]] = []
        for rule in rules:
            if not rule.enabled:
                continue
            if rule.kind == SCHEDULED:
                dispatched.extend(self._tick_scheduled(rule, participants, now))
            else:
                dispatched.extend(self._tick_conditional(rule, participants, now))
        return dispatched

    def _tick_scheduled(self, rule: NotificationRule, participants,
                        now: int) -> list[dict[str, Any]]:
        tz = ZoneInfo(rule.scheduled.timezone)
        today = datetime.fromtimestamp(now / 1000, tz).date()
        out = []
        for participant in participants:
            for instant in plan_day(rule, today, participant.random_id):
                if instant > now:
                    continue
                key = (rule.rule_id, participant.random_id, format_utc_ms(instant))
                if key in self._dispatched_plan:
                    continue
                record = self.dispatcher.dispatch(
                    rule.rule_id, participant.random_id, participant.push_token,
                    rule.message, scheduled_for_ms=instant)
                self._dispatched_plan.add(key)
                self._last_dispatch[(rule.rule_id, participant.random_id)] = \
                    parse_utc_ms(record["triggeredAt"])
                out.append(record)
        return out

    def _tick_conditional(self, rule: NotificationRule, participants,
                          now: int) -> list[dict[str, Any]]:
        readings = self.latest_readings(now)
        presence = self.participant_presence(now)
        fired = evaluate_conditional(rule, readings, presence, now,
                                     self._last_dispatch)
        by_id = {p.random_id: p for p in participants}
        out = []
        for participant_id in fired:
            participant = by_id.get(participant_id)
            if participant is None:
                continue
            record = self.dispatcher.dispatch(
                rule.rule_id, participant_id, participant.push_token, rule.message)
            self._last_dispatch[(rule.rule_id, participant_id)] = \
                parse_utc_ms(record["triggeredAt"])
            out.append(record)
        return out

    # -- state derived from the streams ---------------------------------------

    def latest_readings(self, now_ms: int) -> dict[str, Mapping[str, Any]]:
        """Most recent sensor reading per location, as of ``now_ms``."""
        latest: dict[str, Mapping[str, Any]] = {}
        latest_ts: dict[str, int] = {}
        for record in self.store.query_range("sensor", 0, now_ms + 1):
            label = record.body["locationLabel"]
            if label not in latest_ts or record.timestamp >= latest_ts[label]:
                latest[label] = record.body
                latest_ts[label] = record.timestamp
        return latest

    def participant_presence(self, now_ms: int,
                             location_key: str = "location-place") -> dict[str, str]:
        """participant -> location from each one's most recent response,
        expiring after the presence window."""
        cutoff = int(now_ms - self.presence_window_ms)
        presence: dict[str, str] = {}
        seen_ts: dict[str, int] = {}
        for record in self.store.query_range("responses", cutoff, now_ms + 1):
            location = record.body.get("answers", {}).get(location_key)
            if location is None:
                continue
            pid = record.body["participantId"]
            if pid not in seen_ts or record.timestamp >= seen_ts[pid]:
                presence[pid] = location
                seen_ts[pid] = record.timestamp
        return presence

    # -- serve loop ------------------------------------------------------------

    def run(self, poll_seconds: float = 30.0) -> None:
        log.info("notification scheduler running (poll every %.0fs)", poll_seconds)
        while not self._stop.is_set():
            try:
                self.tick()
            except Exception:
                log.exception("scheduler tick failed")
            self._stop.wait(poll_seconds)

    def stop(self) -> None:
        self._stop.set()
