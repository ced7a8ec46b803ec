"""Bounded byte-capacity frame FIFO, the data-cache stand-in.

The producer side is free-running and cannot be back-pressured, so a frame
that does not fit is dropped whole and counted; partial storage would
poison the downstream word stream. Occupancy accounts serialized size
(header + payload + checksum), since that is what the link must carry.
"""

from __future__ import annotations

from collections import deque

from .framing import Frame


class BoundedFrameFifo:
    def __init__(self, capacity_bytes: int):
        if capacity_bytes <= 0:
            raise ValueError("capacity must be positive")
        self.capacity_bytes = capacity_bytes
        self.occupancy_bytes = 0
        self.overflow_count = 0
        self.max_occupancy_bytes = 0
        self._queue: deque[Frame] = deque()

    def __len__(self) -> int:
        return len(self._queue)

    def push(self, frame: Frame) -> bool:
        """Enqueue whole, or drop whole and count the overflow."""
        size = frame.serialized_size
        if self.occupancy_bytes + size > self.capacity_bytes:
            self.overflow_count += 1
            return False
        self._queue.append(frame)
        self.occupancy_bytes += size
        if self.occupancy_bytes > self.max_occupancy_bytes:
            self.max_occupancy_bytes = self.occupancy_bytes
        return True

    def pop(self) -> Frame | None:
        if not self._queue:
            return None
        frame = self._queue.popleft()
        self.occupancy_bytes -= frame.serialized_size
        return frame

    def peek(self) -> Frame | None:
        return self._queue[0] if self._queue else None
