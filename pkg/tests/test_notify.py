"""Notification planning, conditional triggers, dispatch, and dedup."""
from __future__ import annotations

import json
from datetime import date, datetime, timedelta
from zoneinfo import ZoneInfo

import pytest

from emahub import defaults
from emahub.notify import (
    Dispatcher,
    InvalidRuleError,
    LogProvider,
    ManualClock,
    NoPushTokenError,
    NotificationRule,
    NotificationScheduler,
    ProviderError,
    evaluate_conditional,
    load_rules_file,
    plan_day,
    rule_from_dict,
)
from emahub.registry import ParticipantRegistry
from emahub.store import StreamStore
from emahub.timeutil import format_utc_ms, parse_utc_ms


def scheduled_rule(times=10, start="08:00", end="22:00",
                   tz="America/New_York", rule_id="ten-per-day"):
    return rule_from_dict({
        "ruleId": rule_id, "kind": "scheduled", "message": "how do you feel?",
        "scheduled": {"timesPerDay": times, "wakingStart": start,
                      "wakingEnd": end, "timezone": tz},
    })


def conditional_rule(threshold=28.0, direction="above", cooldown=60,
                     label="Office", rule_id="office-heat"):
    return rule_from_dict({
        "ruleId": rule_id, "kind": "conditional", "message": "warm in here",
        "conditional": {"locationLabel": label, "tempThresholdC": threshold,
                        "direction": direction, "cooldownMinutes": cooldown},
    })


def local_clock_time(instant_ms: int, tz: str):
    return datetime.fromtimestamp(instant_ms / 1000, ZoneInfo(tz)).time()


class TestPlanDay:
    def test_ten_per_day_stays_in_window_with_even_spacing(self):
        rule = scheduled_rule()
        plan = plan_day(rule, date(2021, 3, 1), "participant-a")
        assert len(plan) == 10
        assert plan == sorted(plan)
        for instant in plan:
            t = local_clock_time(instant, "America/New_York")
            assert t >= rule.scheduled.waking_start
            assert t <= rule.scheduled.waking_end
        gaps_min = [(b - a) / 60_000 for a, b in zip(plan, plan[1:])]
        # 14 h / 10 slots: nominal 84 min apart, jitter at most +-10% of a slot
        for gap in gaps_min:
            assert 84 - 2 * 8.4 <= gap <= 84 + 2 * 8.4

    def test_single_dispatch_sits_near_window_midpoint(self):
        rule = scheduled_rule(times=1, tz="UTC")
        [instant] = plan_day(rule, date(2021, 3, 1), "participant-a")
        window_start = parse_utc_ms("2021-03-01T08:00:00.000Z")
        window_end = parse_utc_ms("2021-03-01T22:00:00.000Z")
        midpoint = (window_start + window_end) / 2
        slot = window_end - window_start
        assert abs(instant - midpoint) <= 0.1 * slot

    def test_same_inputs_give_identical_plan(self):
        rule = scheduled_rule()
        a = plan_day(rule, date(2021, 3, 14), "participant-a")
        b = plan_day(rule, date(2021, 3, 14), "participant-a")
        assert a == b

    def test_different_participants_get_different_jitter(self):
        rule = scheduled_rule()
        a = plan_day(rule, date(2021, 3, 1), "participant-a")
        b = plan_day(rule, date(2021, 3, 1), "participant-b")
        assert a != b

    def test_window_confinement_across_a_year_of_timezones(self):
        rule_by_tz = {tz: scheduled_rule(tz=tz) for tz in (
            "America/New_York", "Europe/Berlin", "Asia/Singapore",
            "Australia/Lord_Howe")}
        day = date(2021, 1, 1)
        for offset in range(365):
            d = day + timedelta(days=offset)
            for tz, rule in rule_by_tz.items():
                plan = plan_day(rule, d, "participant-a")
                assert len(plan) == 10
                for instant in plan:
                    t = local_clock_time(instant, tz)
                    assert rule.scheduled.waking_start <= t <= rule.scheduled.waking_end, \
                        (tz, d, format_utc_ms(instant))

    def test_dst_transition_day_keeps_count_and_window(self):
        # US spring-forward 2021-03-14 and fall-back 2021-11-07
        rule = scheduled_rule()
        for d in (date(2021, 3, 14), date(2021, 11, 7)):
            plan = plan_day(rule, d, "participant-a")
            assert len(plan) == 10
            for instant in plan:
                t = local_clock_time(instant, "America/New_York")
                assert rule.scheduled.waking_start <= t <= rule.scheduled.waking_end

    def test_rule_validation(self):
        with pytest.raises(InvalidRuleError):
            scheduled_rule(times=0)
        with pytest.raises(InvalidRuleError):
            scheduled_rule(start="22:00", end="08:00")
        with pytest.raises(InvalidRuleError):
            scheduled_rule(tz="Mars/Olympus")
        with pytest.raises(InvalidRuleError):
            plan_day(conditional_rule(), date(2021, 3, 1), "p")
        disabled = NotificationRule(rule_id="off", kind="scheduled", message="",
                                    enabled=False,
                                    scheduled=scheduled_rule().scheduled)
        with pytest.raises(InvalidRuleError):
            plan_day(disabled, date(2021, 3, 1), "p")


class TestConditional:
    def test_threshold_crossing_fires(self):
        fired = evaluate_conditional(
            conditional_rule(), {"Office": {"dryBulbTempC": 30.2}},
            {"p1": "Office", "p2": "Home"}, 0, {})
        assert fired == ["p1"]

    def test_below_direction(self):
        fired = evaluate_conditional(
            conditional_rule(threshold=18.0, direction="below"),
            {"Office": {"dryBulbTempC": 16.0}}, {"p1": "Office"}, 0, {})
        assert fired == ["p1"]

    def test_threshold_is_strict(self):
        fired = evaluate_conditional(
            conditional_rule(), {"Office": {"dryBulbTempC": 28.0}},
            {"p1": "Office"}, 0, {})
        assert fired == []

    def test_cooldown_suppresses_refire(self):
        rule = conditional_rule(cooldown=60)
        now = 10_000_000
        last = {( "office-heat", "p1"): now - 5 * 60_000}
        fired = evaluate_conditional(rule, {"Office": {"dryBulbTempC": 30.2}},
                                     {"p1": "Office"}, now, last)
        assert fired == []
        last = {("office-heat", "p1"): now - 60 * 60_000}
        fired = evaluate_conditional(rule, {"Office": {"dryBulbTempC": 30.2}},
                                     {"p1": "Office"}, now, last)
        assert fired == ["p1"]

    def test_no_reading_no_fire(self):
        assert evaluate_conditional(conditional_rule(), {}, {"p1": "Office"},
                                    0, {}) == []

    def test_disabled_rule_never_fires(self):
        rule = NotificationRule(rule_id="x", kind="conditional", message="",
                                enabled=False,
                                conditional=conditional_rule().conditional)
        assert evaluate_conditional(rule, {"Office": {"dryBulbTempC": 99}},
                                    {"p1": "Office"}, 0, {}) == []


class ScriptedProvider:
    """Provider whose outcomes are scripted: 'ok' or an error message."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0

    def send(self, token, message, rule_id):
        self.calls += 1
        outcome = self.outcomes.pop(0)
        if outcome != "ok":
            raise ProviderError(outcome)
        return "ok"


class TestDispatcher:
    def test_accepting_provider_logs_ok(self, tmp_path):
        store = StreamStore(tmp_path)
        clock = ManualClock(1_614_585_600_000)
        dispatcher = Dispatcher(store, LogProvider(), clock)
        record = dispatcher.dispatch("r1", "p1", "token-1", "hello")
        assert record["providerStatus"] == "ok"
        assert record["attempts"] == 1
        assert record["deliveredAt"] == record["triggeredAt"]
        assert store.count("dispatches") == 1

    def test_two_failures_then_success_are_all_recorded(self, tmp_path):
        store = StreamStore(tmp_path)
        clock = ManualClock(1_614_585_600_000)
        provider = ScriptedProvider(["boom", "boom again", "ok"])
        dispatcher = Dispatcher(store, provider, clock)
        record = dispatcher.dispatch("r1", "p1", "token-1", "hello")
        assert record["providerStatus"] == "ok"
        assert record["attempts"] == 3
        assert record["attemptStatuses"] == ["error: boom", "error: boom again", "ok"]
        # retries backed off 1 then 2 minutes on the injected clock
        delivered = parse_utc_ms(record["deliveredAt"])
        triggered = parse_utc_ms(record["triggeredAt"])
        assert delivered - triggered == 3 * 60_000
        assert store.count("dispatches") == 1

    def test_exhausted_retries_still_append_a_record(self, tmp_path):
        store = StreamStore(tmp_path)
        provider = ScriptedProvider(["a", "b", "c", "d"])
        dispatcher = Dispatcher(store, provider, ManualClock(0))
        record = dispatcher.dispatch("r1", "p1", "token-1", "hello")
        assert provider.calls == 4
        assert record["providerStatus"] == "error: d"
        assert "deliveredAt" not in record
        assert store.count("dispatches") == 1

    def test_missing_token_means_no_provider_call_and_no_record(self, tmp_path):
        store = StreamStore(tmp_path)
        provider = ScriptedProvider(["ok"])
        dispatcher = Dispatcher(store, provider, ManualClock(0))
        with pytest.raises(NoPushTokenError):
            dispatcher.dispatch("r1", "p1", None, "hello")
        assert provider.calls == 0
        assert store.count("dispatches") == 0


def make_participants(tmp_path, n=2):
    registry = ParticipantRegistry(tmp_path, pbkdf2_iterations=1200)
    rules = defaults.example_eligibility()
    pids = []
    for i in range(n):
        p = registry.register(f"n{i}@example.com", "password-longer-than-10")
        registry.screen(p.random_id, {"age": 30, "owns-compatible-watch": "Yes"},
                        rules)
        registry.record_consent(p.random_id, f"Name {i}", "1", 0)
        registry.register_push_token(p.random_id, f"token-{i}")
        pids.append(p.random_id)
    return registry, pids


class TestScheduler:
    def test_planned_dispatches_fire_once_and_survive_restart(self, tmp_path):
        store = StreamStore(tmp_path)
        registry, pids = make_participants(tmp_path, n=1)
        rule = scheduled_rule(times=3, tz="UTC")
        clock = ManualClock(parse_utc_ms("2021-03-01T23:00:00.000Z"))
        provider = LogProvider()
        scheduler = NotificationScheduler(store, registry, [rule], provider, clock)
        fired = scheduler.tick()
        assert len(fired) == 3  # whole day is past at 23:00 UTC
        assert scheduler.tick() == []  # idempotent within the process

        # a fresh scheduler over the same store must not re-fire
        scheduler2 = NotificationScheduler(store, registry, [rule], provider, clock)
        assert scheduler2.tick() == []
        assert store.count("dispatches") == 3

    def test_future_instants_do_not_fire_early(self, tmp_path):
        store = StreamStore(tmp_path)
        registry, pids = make_participants(tmp_path, n=1)
        rule = scheduled_rule(times=3, tz="UTC")
        clock = ManualClock(parse_utc_ms("2021-03-01T00:00:00.000Z"))
        scheduler = NotificationScheduler(store, registry, [rule], LogProvider(),
                                          clock)
        assert scheduler.tick() == []
        plan = plan_day(rule, date(2021, 3, 1), pids[0])
        clock.set(plan[0] + 1)
        assert len(scheduler.tick()) == 1

    def test_conditional_flow_through_streams(self, tmp_path):
        store = StreamStore(tmp_path)
        registry, pids = make_participants(tmp_path, n=1)
        pid = pids[0]
        t0 = parse_utc_ms("2021-03-01T12:00:00.000Z")
        store.append("sensor", t0, {
            "loggerId": "L1", "locationLabel": "Office",
            "timestamp": format_utc_ms(t0), "dryBulbTempC": 30.2,
            "relativeHumidityPct": 50.0})
        store.append("responses", t0, {
            "participantId": pid, "surveyId": "comfort-study",
            "surveyVersion": 1, "startedAt": format_utc_ms(t0 - 10_000),
            "submittedAt": format_utc_ms(t0),
            "answers": {"tc-preference": "Cooler", "location-place": "Office"}})
        clock = ManualClock(t0 + 60_000)
        scheduler = NotificationScheduler(store, registry, [conditional_rule()],
                                          LogProvider(), clock)
        assert len(scheduler.tick()) == 1
        clock.set(t0 + 5 * 60_000)
        assert scheduler.tick() == []  # cooldown
        clock.set(t0 + 61 * 60_000)
        assert len(scheduler.tick()) == 1  # cooldown expired, still hot

    def test_presence_expires_after_window(self, tmp_path):
        store = StreamStore(tmp_path)
        registry, pids = make_participants(tmp_path, n=1)
        pid = pids[0]
        t0 = parse_utc_ms("2021-03-01T06:00:00.000Z")
        store.append("responses", t0, {
            "participantId": pid, "surveyId": "comfort-study",
            "surveyVersion": 1, "startedAt": format_utc_ms(t0 - 10_000),
            "submittedAt": format_utc_ms(t0),
            "answers": {"location-place": "Office"}})
        store.append("sensor", t0, {
            "loggerId": "L1", "locationLabel": "Office",
            "timestamp": format_utc_ms(t0), "dryBulbTempC": 31.0,
            "relativeHumidityPct": 50.0})
        clock = ManualClock(t0 + 3 * 3_600_000)  # 3 h later: presence expired
        scheduler = NotificationScheduler(store, registry, [conditional_rule()],
                                          LogProvider(), clock)
        assert scheduler.tick() == []

    def test_participants_without_tokens_are_skipped(self, tmp_path):
        store = StreamStore(tmp_path)
        registry = ParticipantRegistry(tmp_path, pbkdf2_iterations=1200)
        p = registry.register("quiet@example.com", "password-longer-than-10")
        registry.screen(p.random_id, {"age": 30, "owns-compatible-watch": "Yes"},
                        defaults.example_eligibility())
        registry.record_consent(p.random_id, "Quiet Person", "1", 0)
        clock = ManualClock(parse_utc_ms("2021-03-01T23:00:00.000Z"))
        scheduler = NotificationScheduler(store, registry,
                                          [scheduled_rule(times=2, tz="UTC")],
                                          LogProvider(), clock)
        assert scheduler.tick() == []
        assert store.count("dispatches") == 0


def test_rules_file_round_trip(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(json.dumps(defaults.example_rules_doc()))
    rules = load_rules_file(path)
    assert [r.rule_id for r in rules] == ["ten-per-day", "office-heat"]
    assert rules[0].scheduled.times_per_day == 10
    assert rules[1].conditional.temp_threshold_c == 28.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rules": [{"ruleId": "x", "kind": "sometimes"}]}))
    with pytest.raises(InvalidRuleError):
        load_rules_file(bad)
