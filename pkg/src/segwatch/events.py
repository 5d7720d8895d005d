"""Single-timeline discrete-event queue.

Events fire in (time_us, insertion sequence) order, so simultaneous events
run FIFO.
"""
from __future__ import annotations

import heapq
from collections import Counter
from typing import Any, Callable


class EventQueue:
    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.now = 0
        # (domain, origin) -> number of events scheduled
        self.scheduled: Counter = Counter()

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, ts_us: int, fn: Callable[..., Any], *args,
                 domain: str = "sim", origin: str = "") -> None:
        if ts_us < self.now:
            raise ValueError(f"cannot schedule at {ts_us}, clock is at {self.now}")
        heapq.heappush(self._heap, (ts_us, self._seq, fn, args, domain, origin))
        self._seq += 1
        self.scheduled[domain, origin] += 1

    def run(self, until: int | None = None) -> None:
        heap = self._heap
        while heap:
            if until is not None and heap[0][0] > until:
                break
            ts, _, fn, args, _, _ = heapq.heappop(heap)
            self.now = ts
            fn(*args)
