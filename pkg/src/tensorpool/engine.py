"""Single-clock event scheduler shared by all timed components.

The simulator advances one global cycle at a time, but only cycles with
pending events are visited.  Within a cycle, events run in a fixed phase
order so that concurrent components interact deterministically:

    0  deliver   response arrivals, transaction commits, engine wakeups
    1  issue     engines emit new requests (TE streamers, PEs, DMA lanes)
    2  grant     request-port arbitration
    3  arrive    requests reach destination tiles, banks are booked
    4  respond   response channels ship beat groups back

Callbacks scheduled for the current cycle at the current-or-later phase are
executed in the same cycle; scheduling into an already-passed phase of the
current cycle is a modeling bug and asserts.
"""

from __future__ import annotations

import heapq

PHASE_DELIVER = 0
PHASE_ISSUE = 1
PHASE_GRANT = 2
PHASE_ARRIVE = 3
PHASE_RESPOND = 4
_NUM_PHASES = 5


class DeadlockError(RuntimeError):
    """No component can make progress but work remains outstanding."""


class Scheduler:
    """Bucketed event queue with cycle skipping."""

    def __init__(self, watchdog_idle_cycles: int = 10000):
        self.now = 0
        self.events_run = 0
        self.last_progress = 0
        self.watchdog = watchdog_idle_cycles
        self._buckets: dict[int, list[list]] = {}
        self._heap: list[int] = []
        self._live_cycle = -1
        self._live_bucket = None
        self._live_phase = -1

    def at(self, cycle: int, phase: int, fn) -> None:
        assert cycle >= self.now, "cannot schedule into the past"
        if cycle == self._live_cycle:
            assert phase >= self._live_phase, "cannot schedule into an elapsed phase"
            self._live_bucket[phase].append(fn)
            return
        bucket = self._buckets.get(cycle)
        if bucket is None:
            bucket = [[] for _ in range(_NUM_PHASES)]
            self._buckets[cycle] = bucket
            heapq.heappush(self._heap, cycle)
        bucket[phase].append(fn)

    def progress(self) -> None:
        """Mark forward progress for the watchdog (commits, stage completions)."""
        self.last_progress = self.now

    def run(self) -> int:
        """Drain all events; returns the final cycle reached."""
        while self._heap:
            cycle = heapq.heappop(self._heap)
            bucket = self._buckets.pop(cycle)
            if cycle - self.last_progress > self.watchdog:
                raise DeadlockError(
                    f"no progress for {cycle - self.last_progress} cycles "
                    f"(cycle {cycle}, {self.events_run} events run)")
            self.now = cycle
            self._live_cycle = cycle
            self._live_bucket = bucket
            for phase in range(_NUM_PHASES):
                self._live_phase = phase
                lst = bucket[phase]
                i = 0
                while i < len(lst):
                    lst[i]()
                    i += 1
            self.events_run += len(bucket[0]) + len(bucket[1]) + len(bucket[2]) \
                + len(bucket[3]) + len(bucket[4])
            self._live_cycle = -1
            self._live_bucket = None
        return self.now
