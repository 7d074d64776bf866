"""Virtual-time event queue."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable


class EventKind(IntEnum):
    # numeric order is the tie-break among simultaneous events of one (rank, rail)
    FAIL = 0
    READMIT = 1
    SEND_START = 2
    SEND_END = 3
    REDUCE_DONE = 4
    FLUSH = 5


@dataclass(frozen=True, order=True)
class SimEvent:
    timestamp: float                  # virtual µs
    rank: int
    rail_id: int
    kind: EventKind
    op_seq: int = 0
    data: Any = field(default=None, compare=False)


class EventLoop:
    """Processes events in (timestamp, rank, rail_id, kind, op_seq) order."""

    def __init__(self, record: bool = False):
        self.now = 0.0
        self._heap: list[SimEvent] = []
        self.trace: list[SimEvent] | None = [] if record else None
        self.processed = 0

    def push(self, ev: SimEvent) -> None:
        if ev.timestamp < self.now:
            raise ValueError(f"event at {ev.timestamp} scheduled in the past ({self.now})")
        heapq.heappush(self._heap, ev)

    def __len__(self):
        return len(self._heap)

    def run(self, handler: Callable[[SimEvent], None], until: float | None = None,
            stop: Callable[[], bool] | None = None) -> None:
        """Process events up to ``until`` (inclusive) or until ``stop()`` turns true."""
        while self._heap:
            if stop is not None and stop():
                break
            if until is not None and self._heap[0].timestamp > until:
                break
            ev = heapq.heappop(self._heap)
            self.now = ev.timestamp
            self.processed += 1
            if self.trace is not None:
                self.trace.append(ev)
            handler(ev)
