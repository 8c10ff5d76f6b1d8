"""Per-key sliding-window request limiter.

A request at time ``t`` is admitted when fewer than ``limit`` requests were
already admitted in the window ``(t - window, t]``; denied requests do not
consume quota. Decisions are deterministic given the admitted-timestamp
history, and keys never interact.
"""
from __future__ import annotations

import threading
from collections import deque


class SlidingWindowLimiter:
    def __init__(self, window_seconds: float = 3600.0):
        self.window_ms = int(window_seconds * 1000)
        self._admitted: dict[str, deque[int]] = {}
        self._lock = threading.Lock()

    def check(self, key: str, limit: int, now_ms: int) -> bool:
        """Admit (and record) the request, or deny it."""
        if limit < 1:
            return False
        with self._lock:
            window = self._admitted.setdefault(key, deque())
            cutoff = now_ms - self.window_ms
            while window and window[0] <= cutoff:
                window.popleft()
            if len(window) >= limit:
                return False
            window.append(now_ms)
            return True

    def admitted_in_window(self, key: str, now_ms: int) -> int:
        with self._lock:
            window = self._admitted.get(key, ())
            cutoff = now_ms - self.window_ms
            return sum(1 for t in window if t > cutoff)
