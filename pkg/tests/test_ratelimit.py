"""Sliding-window limiter against a brute-force window-count oracle."""
from __future__ import annotations

import random

from emahub.ratelimit import SlidingWindowLimiter

HOUR_MS = 3_600_000
MIN_MS = 60_000


class WindowOracle:
    """Recount the admitted history on every decision; no pruning tricks."""

    def __init__(self, window_ms: int = HOUR_MS):
        self.window_ms = window_ms
        self.admitted: list[int] = []

    def check(self, limit: int, now: int) -> bool:
        inside = [t for t in self.admitted if now - t < self.window_ms]
        if len(inside) < limit and limit >= 1:
            self.admitted.append(now)
            return True
        return False


def test_empty_history_allows():
    limiter = SlidingWindowLimiter()
    assert limiter.check("k", 2, 0)


def test_third_request_inside_window_denied():
    limiter = SlidingWindowLimiter()
    t = 1_000_000
    assert limiter.check("k", 2, t)
    assert limiter.check("k", 2, t + MIN_MS)
    assert not limiter.check("k", 2, t + 2 * MIN_MS)


def test_request_exactly_one_window_later_is_admitted():
    limiter = SlidingWindowLimiter()
    assert limiter.check("k", 1, 0)
    assert not limiter.check("k", 1, HOUR_MS - 1)
    assert limiter.check("k", 1, HOUR_MS)


def test_denied_requests_do_not_consume_quota():
    limiter = SlidingWindowLimiter()
    assert limiter.check("k", 1, 0)
    for i in range(10):
        assert not limiter.check("k", 1, 1000 + i)
    assert limiter.check("k", 1, HOUR_MS)


def test_keys_are_isolated():
    limiter = SlidingWindowLimiter()
    assert limiter.check("a", 1, 0)
    assert limiter.check("b", 1, 0)
    assert not limiter.check("a", 1, 1)


def test_burst_admits_exactly_the_limit():
    limiter = SlidingWindowLimiter()
    admitted = sum(limiter.check("k", 60, 5_000 + i) for i in range(200))
    assert admitted == 60


def test_decisions_match_oracle_on_random_sequences():
    rng = random.Random(20210301)
    for case in range(2000):
        limit = rng.randint(1, 10)
        limiter = SlidingWindowLimiter()
        oracle = WindowOracle()
        now = rng.randrange(0, 10**9)
        for _ in range(rng.randint(1, 40)):
            now += rng.choice([0, 1, 10, 500, MIN_MS, 10 * MIN_MS, HOUR_MS // 2,
                               HOUR_MS - 1, HOUR_MS, HOUR_MS + 1])
            assert limiter.check("k", limit, now) == oracle.check(limit, now), \
                (case, limit, now)
