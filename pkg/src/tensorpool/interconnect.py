"""Hierarchical L1 interconnect: remote arbiters, bursts, grouped responses.

Each tile owns one remote-request arbiter with `subgroups_per_group` ports
toward the subgroups of its own group and `groups - 1` ports toward remote
groups (7 at defaults).  A port retires one request per cycle, round-robin
over the tile's initiators; a J-widened wide write holds its port for 16/J
consecutive slots.  The Burst-Grouper turns a 512-bit wide read into a
single header occupying one slot; the Burst-Distributor at the target tile
expands it back into 16 narrow bank requests.

Responses return on a per-port channel that groups up to K beats of one tag
under a single handshake per cycle; transactions stream back one at a time
(non-preemptive), FIFO in arrival order.  Reordering across tags is the
initiator-side ROB's job.

Spill registers at the hierarchy boundaries are what the 3/5/9-cycle
latencies account for; they are not added on top.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import ClusterConfig
from .engine import (PHASE_ARRIVE, PHASE_DELIVER, PHASE_GRANT, PHASE_RESPOND,
                     Scheduler)

NARROW_READ = 0
NARROW_WRITE = 1
WIDE_READ = 2
WIDE_WRITE = 3
BURST_HEADER = 4

KIND_NAMES = ("narrow-read", "narrow-write", "wide-read", "wide-write",
              "burst-read-header")

EV_ISSUE = "issue"
EV_GRANT = "arb_grant"
EV_BANK = "bank_access"
EV_COMMIT = "resp_commit"


class AlignmentFault(ValueError):
    """Wide access not aligned to its natural 64 B boundary."""


class Txn:
    """One memory transaction from an initiator toward the banks."""

    __slots__ = ("kind", "addr", "beats", "src", "dst", "initiator", "tag",
                 "issue", "grant", "commit", "req_slots", "on_commit", "data",
                 "want_data")

    def __init__(self, kind, addr, src, dst, initiator, tag, issue,
                 beats=1, on_commit=None, data=None, want_data=False):
        self.kind = kind
        self.addr = addr
        self.beats = beats
        self.src = src
        self.dst = dst
        self.initiator = initiator
        self.tag = tag
        self.issue = issue
        self.grant = -1
        self.commit = -1
        self.req_slots = 1
        self.on_commit = on_commit
        self.data = data
        self.want_data = want_data


@dataclass
class GroupedResponse:
    """Beat indices of one tag shipped under a single valid/ready handshake."""

    tag: int
    beat_ids: list
    data: object = None


def burst_group(txn: Txn) -> Txn:
    """Compress a wide read into a one-slot burst header (in place).

    Narrow transactions pass through unchanged.
    """
    if txn.kind == WIDE_READ:
        if txn.addr % 64:
            raise AlignmentFault(f"wide read at {txn.addr:#x} not 64 B aligned")
        txn.kind = BURST_HEADER
        txn.req_slots = 1
    return txn


def burst_distribute(header: Txn, cfg: ClusterConfig) -> np.ndarray:
    """Expand a burst header into its 16 narrow bank-request addresses."""
    assert header.kind == BURST_HEADER
    addrs = header.addr + 4 * np.arange(header.beats, dtype=np.int64)
    tiles = cfg.tiles_of_addrs(addrs)
    assert (tiles == tiles[0]).all(), "burst spans multiple tiles"
    return addrs


def widen_writes(txns, j: int):
    """Set per-transaction request-slot counts for a J-widened write path."""
    if j not in (1, 2, 4):
        raise ValueError(f"J must be in {{1,2,4}}, got {j}")
    for txn in txns:
        if txn.kind == WIDE_WRITE:
            if txn.addr % 64:
                raise AlignmentFault(f"wide write at {txn.addr:#x} not 64 B aligned")
            txn.req_slots = txn.beats // j
        else:
            txn.req_slots = 1
    return txns


def response_schedule(ready: np.ndarray, k: int, start: int):
    """Delivery cycles for beat groups of one tag.

    Beats are shipped in readiness order, up to `k` per cycle, first group no
    earlier than `start`.  Returns (per-group delivery cycles, group sizes).
    """
    order = np.sort(ready)
    cycles = []
    t = start - 1
    i = 0
    n = order.shape[0]
    while i < n:
        hi = min(i + k, n)
        t = max(t + 1, int(order[hi - 1]))
        cycles.append(t)
        i = hi
    sizes = [k] * (len(cycles) - 1) + [n - k * (len(cycles) - 1)] if cycles else []
    return cycles, sizes


class RequestPort:
    """One outbound arbiter port: one request retired per cycle."""

    __slots__ = ("fabric", "tile", "index", "is_group_port", "next_free",
                 "queues", "rr", "pending", "_armed", "grants")

    def __init__(self, fabric, tile, index, is_group_port, n_requestors):
        self.fabric = fabric
        self.tile = tile
        self.index = index
        self.is_group_port = is_group_port
        self.next_free = 0
        self.queues = [deque() for _ in range(n_requestors)]
        self.rr = 0
        self.pending = 0
        self._armed = -1
        self.grants = 0

    def enqueue(self, txn: Txn) -> None:
        self.queues[txn.initiator].append(txn)
        self.pending += 1
        self._arm(max(self.fabric.sched.now, self.next_free))

    def _arm(self, cycle: int) -> None:
        if self._armed == -1 or self._armed > cycle:
            self._armed = cycle
            self.fabric.sched.at(cycle, PHASE_GRANT, self._service)

    def _service(self) -> None:
        self._armed = -1
        if self.pending == 0:
            return
        now = self.fabric.sched.now
        if self.next_free > now:
            self._arm(self.next_free)
            return
        nq = len(self.queues)
        for off in range(nq):
            slot = (self.rr + off) % nq
            q = self.queues[slot]
            if q:
                txn = q.popleft()
                self.rr = (slot + 1) % nq
                break
        else:  # pragma: no cover - pending count guards this
            return
        self.pending -= 1
        txn.grant = now
        self.next_free = now + txn.req_slots
        self.grants += 1
        self.fabric.on_grant(self, txn)
        if self.pending:
            self._arm(self.next_free)


class ResponseChannel:
    """Per-port return path: one handshake of up to K beats per cycle.

    Transactions stream back whole (non-preemptive), FIFO in arrival order;
    the channel is busy for ceil(beats/K) cycles per transaction.
    """

    __slots__ = ("fabric", "tile", "index", "next_free", "queue", "_armed",
                 "handshakes")

    def __init__(self, fabric, tile, index):
        self.fabric = fabric
        self.tile = tile
        self.index = index
        self.next_free = 0
        self.queue = deque()
        self._armed = -1
        self.handshakes = 0

    def enqueue(self, txn: Txn, ready: np.ndarray) -> None:
        self.queue.append((txn, ready))
        self._arm(max(self.fabric.sched.now + 1, self.next_free, int(ready.min())))

    def _arm(self, cycle: int) -> None:
        if self._armed == -1 or self._armed > cycle:
            self._armed = cycle
            self.fabric.sched.at(cycle, PHASE_RESPOND, self._service)

    def _service(self) -> None:
        self._armed = -1
        if not self.queue:
            return
        now = self.fabric.sched.now
        txn, ready = self.queue[0]
        first = int(ready.min())
        start = max(now, self.next_free, first)
        if start > now:
            self._arm(start)
            return
        self.queue.popleft()
        cycles, _sizes = response_schedule(
            ready, self.fabric.cfg.response_group_k, start)
        last = cycles[-1]
        self.handshakes += len(cycles)
        self.next_free = last + 1
        lat = self.fabric.latency[self.tile, txn.dst]
        self.fabric.finish_read(txn, last + int(lat))
        if self.queue:
            nxt_txn, nxt_ready = self.queue[0]
            self._arm(max(self.next_free, int(nxt_ready.min())))


class Fabric:
    """All tiles' ports, channels, and the burst adapters."""

    def __init__(self, cfg: ClusterConfig, sched: Scheduler, banks):
        self.cfg = cfg
        self.sched = sched
        self.banks = banks
        self.latency = cfg.latency_matrix()
        self.n_requestors = cfg.pes_per_tile + 1  # PEs plus the TE streamer
        nports = cfg.subgroups_per_group + cfg.groups - 1
        self.nports = nports
        self.ports = [[RequestPort(self, t, p, p >= cfg.subgroups_per_group,
                                   self.n_requestors)
                       for p in range(nports)]
                      for t in range(cfg.total_tiles)]
        self.channels = [[ResponseChannel(self, t, p) for p in range(nports)]
                         for t in range(cfg.total_tiles)]
        self.trace = None  # callable(cycle, tag, kind, src, dst, event)
        self.response_jitter = None  # callable(txn, ready)->ready, test hook
        self.bursts_issued = 0
        self.narrow_requests = 0
        self.wide_writes = 0
        self.grants_subgroup = 0
        self.grants_group = 0
        self.read_bytes = 0
        self.write_bytes = 0
        self._tag_seq = 0

    # --- entry points -------------------------------------------------------

    def next_tag(self) -> int:
        self._tag_seq += 1
        return self._tag_seq

    def port_index(self, src_tile: int, dst_tile: int) -> int:
        """Arbiter port serving dst from src; -1 for the local crossbar."""
        cfg = self.cfg
        if src_tile == dst_tile:
            return -1
        sg = cfg.subgroups_per_group
        if src_tile // cfg.tiles_per_group == dst_tile // cfg.tiles_per_group:
            return (dst_tile // cfg.tiles_per_subgroup) % sg
        dst_g = dst_tile // cfg.tiles_per_group
        src_g = src_tile // cfg.tiles_per_group
        return sg + dst_g - (1 if dst_g > src_g else 0)

    def route(self, txn: Txn) -> None:
        """Inject a transaction at its initiator tile in the current cycle."""
        now = self.sched.now
        txn.issue = now
        if self.trace:
            self.trace(now, txn.tag, txn.kind, txn.src, txn.dst, EV_ISSUE)
        if txn.kind == WIDE_READ:
            burst_group(txn)
            self.bursts_issued += 1
        elif txn.kind == WIDE_WRITE:
            widen_writes((txn,), self.cfg.request_widen_j)
            self.wide_writes += 1
        else:
            self.narrow_requests += 1
        if txn.kind in (NARROW_READ, BURST_HEADER):
            self.read_bytes += 4 * txn.beats
        else:
            self.write_bytes += 4 * txn.beats

        if txn.src == txn.dst:
            self._local_access(txn)
            return
        self.ports[txn.src][self.port_index(txn.src, txn.dst)].enqueue(txn)

    def _local_access(self, txn: Txn) -> None:
        """Single-cycle local crossbar: banks this cycle, data the next."""
        now = self.sched.now
        txn.grant = now
        if txn.beats == 1:
            grant = self.banks.book_narrow(txn.addr, now)
            done = grant + 1
        else:
            grants = self.banks.book_span(txn.addr, txn.beats, now)
            done = int(grants.max()) + 1
        if self.trace:
            self.trace(now, txn.tag, txn.kind, txn.src, txn.dst, EV_BANK)
        self._touch_data(txn)
        txn.commit = done
        self.sched.at(done, PHASE_DELIVER, lambda: self._commit(txn))

    # --- pipeline stages ----------------------------------------------------

    def on_grant(self, port: RequestPort, txn: Txn) -> None:
        if port.is_group_port:
            self.grants_group += 1
        else:
            self.grants_subgroup += 1
        if self.trace:
            self.trace(self.sched.now, txn.tag, txn.kind, txn.src, txn.dst, EV_GRANT)
        lat = int(self.latency[txn.src, txn.dst])
        arrival = self.sched.now + txn.req_slots - 1 + lat
        self.sched.at(arrival, PHASE_ARRIVE, lambda: self._arrive(port, txn))

    def _arrive(self, port: RequestPort, txn: Txn) -> None:
        now = self.sched.now
        if self.trace:
            self.trace(now, txn.tag, txn.kind, txn.src, txn.dst, EV_BANK)
        if txn.beats == 1:
            grants = np.array([self.banks.book_narrow(txn.addr, now)], dtype=np.int64)
        else:
            grants = self.banks.book_span(txn.addr, txn.beats, now)
        self._touch_data(txn)
        if txn.kind in (NARROW_READ, BURST_HEADER):
            ready = grants + 1
            if self.response_jitter is not None:
                ready = self.response_jitter(txn, ready)
            self.channels[txn.src][port.index].enqueue(txn, ready)
        else:
            # posted write: completion event only for synchronization
            done = int(grants.max()) + 1
            txn.commit = done
            self.sched.at(done, PHASE_DELIVER, lambda: self._commit(txn))

    def finish_read(self, txn: Txn, commit_cycle: int) -> None:
        txn.commit = commit_cycle
        self.sched.at(commit_cycle, PHASE_DELIVER, lambda: self._commit(txn))

    def _commit(self, txn: Txn) -> None:
        if self.trace:
            self.trace(self.sched.now, txn.tag, txn.kind, txn.src, txn.dst, EV_COMMIT)
        self.sched.progress()
        if txn.on_commit is not None:
            txn.on_commit(txn)

    def _touch_data(self, txn: Txn) -> None:
        """Functional storage semantics for transactions carrying payloads."""
        if txn.kind in (NARROW_WRITE, WIDE_WRITE):
            if txn.data is not None:
                self.banks.write_bytes(txn.addr, txn.data)
        elif txn.want_data:
            txn.data = self.banks.read_bytes(txn.addr, 4 * txn.beats).copy()
