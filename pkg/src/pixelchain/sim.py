"""Deterministic discrete-event core: virtual clock and bounded hand-off.

Virtual time is integer nanoseconds; events at equal timestamps run in
insertion order, so a run is a pure function of its inputs. Rate math is
kept on per-link float timelines and only event *instants* are quantized,
which avoids cumulative rounding drift in long saturated runs.
"""

from __future__ import annotations

import heapq
from collections import deque


class VirtualClock:
    def __init__(self):
        self.now_ns = 0
        self._heap: list[tuple[int, int, object]] = []
        self._seq = 0

    def at(self, t_ns: float, fn) -> None:
        t = int(t_ns)
        if t < self.now_ns:
            raise ValueError(f"cannot schedule at {t} before now={self.now_ns}")
        heapq.heappush(self._heap, (t, self._seq, fn))
        self._seq += 1

    def after(self, dt_ns: float, fn) -> None:
        self.at(self.now_ns + dt_ns, fn)

    def run(self, until_ns: int | None = None) -> None:
        """Execute events in time order; with a horizon, stop there and
        advance now to it."""
        while self._heap:
            t, _, fn = self._heap[0]
            if until_ns is not None and t > until_ns:
                break
            heapq.heappop(self._heap)
            self.now_ns = t
            fn()
        if until_ns is not None and until_ns > self.now_ns:
            self.now_ns = until_ns

    @property
    def pending(self) -> int:
        return len(self._heap)


class Channel:
    """Bounded in-order frame hand-off between chain neighbours.

    A sender reserves a slot when its transfer starts and fills it on
    delivery, so capacity covers in-flight frames too; that is the
    backpressure that keeps the chain lossless.
    """

    def __init__(self, capacity: int = 2):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._q = deque()
        self._reserved = 0

    def __len__(self) -> int:
        return len(self._q)

    @property
    def has_room(self) -> bool:
        return len(self._q) + self._reserved < self.capacity

    def reserve(self) -> None:
        if not self.has_room:
            raise RuntimeError("reserve on a full channel")
        self._reserved += 1

    def push(self, frame) -> None:
        if self._reserved <= 0:
            raise RuntimeError("push without reservation")
        self._reserved -= 1
        self._q.append(frame)

    def pop(self):
        return self._q.popleft() if self._q else None
