"""Scratchpad banks, L2 backing store, and the register-programmed DMA.

Banks are single-ported: one access per bank per cycle.  Timing is kept as a
per-bank reservation clock (`bank_free`); each booking returns the actual
service cycle, so two same-cycle requests to one bank serialize exactly as a
retry-next-cycle arbiter would.  Booked cycles per bank are strictly
increasing, which holds by construction and proves bank exclusivity for the
whole run.

Functional storage is a flat little-endian byte image per memory level; the
bank structure only affects timing.
"""

from __future__ import annotations

import math

import numpy as np

from .config import ClusterConfig
from .engine import PHASE_DELIVER, PHASE_ISSUE, Scheduler


class MemoryFault(ValueError):
    """Out-of-range transfer or image access."""


class BankArray:
    """All L1 banks: flat functional image plus per-bank timing clocks."""

    def __init__(self, cfg: ClusterConfig):
        self.cfg = cfg
        self.data = np.zeros(cfg.l1_bytes, dtype=np.uint8)
        # bank_free[b] = first cycle at which bank b can serve a new access
        self.bank_free = np.zeros(cfg.total_banks, dtype=np.int64)
        self.accesses = 0
        self.conflict_cycles = 0
        self._row = cfg.tile_row_bytes
        self._banks_per_tile = cfg.banks_per_tile
        self._tiles = cfg.total_tiles

    def book_narrow(self, addr: int, arrival: int) -> int:
        """Reserve the bank holding `addr`; returns the service cycle."""
        bank = (addr // self._row) % self._tiles * self._banks_per_tile \
            + (addr % self._row) // 4
        free = self.bank_free[bank]
        grant = free if free > arrival else arrival
        self.bank_free[bank] = grant + 1
        self.accesses += 1
        if grant > arrival:
            self.conflict_cycles += int(grant - arrival)
        return int(grant)

    def book_span(self, addr: int, nwords: int, arrival: int) -> np.ndarray:
        """Reserve `nwords` consecutive word banks starting at `addr`.

        The span must stay within one tile's interleave row (guaranteed for
        64 B-aligned bursts by the address map).  Returns per-word service
        cycles.
        """
        tile = (addr // self._row) % self._tiles
        first = tile * self._banks_per_tile + (addr % self._row) // 4
        sl = slice(first, first + nwords)
        free = self.bank_free[sl]
        grants = np.maximum(free, arrival)
        assert grants.shape[0] == nwords, "burst span crosses a tile boundary"
        self.bank_free[sl] = grants + 1
        self.accesses += nwords
        self.conflict_cycles += int(np.sum(grants > arrival))
        return grants

    # --- functional image ---------------------------------------------------

    def read_bytes(self, addr: int, n: int) -> np.ndarray:
        if addr < 0 or addr + n > self.cfg.l1_bytes:
            raise MemoryFault(f"L1 read [{addr:#x}, {addr + n:#x}) out of range")
        return self.data[addr:addr + n]

    def write_bytes(self, addr: int, payload) -> None:
        payload = np.asarray(payload, dtype=np.uint8)
        n = payload.size
        if addr < 0 or addr + n > self.cfg.l1_bytes:
            raise MemoryFault(f"L1 write [{addr:#x}, {addr + n:#x}) out of range")
        self.data[addr:addr + n] = payload

    def scatter_rows(self, addrs: np.ndarray, rows: np.ndarray) -> None:
        """Write one byte row per address (rows: [naddrs, nbytes])."""
        idx = addrs[:, None] + np.arange(rows.shape[1])
        self.data[idx.reshape(-1)] = rows.reshape(-1)

    def gather_rows(self, addrs: np.ndarray, nbytes: int) -> np.ndarray:
        idx = addrs[:, None] + np.arange(nbytes)
        return self.data[idx.reshape(-1)].reshape(addrs.size, nbytes)

    def dump_image(self, path) -> None:
        self.data.tofile(path)

    def load_image(self, path) -> None:
        img = np.fromfile(path, dtype=np.uint8)
        if img.size != self.cfg.l1_bytes:
            raise MemoryFault(f"L1 image size {img.size} != {self.cfg.l1_bytes}")
        self.data[:] = img


class L2Memory:
    """Flat fixed-latency backing store; capacity grows on demand."""

    def __init__(self, initial_bytes: int = 1 << 20):
        self.data = np.zeros(initial_bytes, dtype=np.uint8)

    def _ensure(self, end: int) -> None:
        if end > self.data.size:
            grown = np.zeros(max(end, self.data.size * 2), dtype=np.uint8)
            grown[:self.data.size] = self.data
            self.data = grown

    def read_bytes(self, addr: int, n: int) -> np.ndarray:
        if addr < 0:
            raise MemoryFault("negative L2 address")
        self._ensure(addr + n)
        return self.data[addr:addr + n]

    def write_bytes(self, addr: int, payload) -> None:
        payload = np.asarray(payload, dtype=np.uint8)
        if addr < 0:
            raise MemoryFault("negative L2 address")
        self._ensure(addr + payload.size)
        self.data[addr:addr + payload.size] = payload

    def dump_image(self, path) -> None:
        self.data.tofile(path)


class DmaJob:
    __slots__ = ("src", "dst", "length", "to_l1", "status", "on_done",
                 "start_cycle", "done_cycle", "mirror")

    def __init__(self, src: int, dst: int, length: int, to_l1: bool,
                 on_done=None, mirror: bool = True):
        if length <= 0:
            raise MemoryFault("DMA length must be positive")
        self.src = src
        self.dst = dst
        self.length = length
        self.to_l1 = to_l1
        self.on_done = on_done
        self.status = "idle"
        self.start_cycle = -1
        self.done_cycle = -1
        self.mirror = mirror


class DmaEngine:
    """Centralized DMA striping 64 B beats over per-subgroup L2 lanes.

    The DMA rides its own hierarchical AXI network, so it never competes for
    the L1 request ports; it couples with compute traffic only at the banks.
    Each subgroup lane moves at most one 64 B beat per cycle per direction,
    after an `l2_latency` pipeline fill.  Jobs execute FIFO in programming
    order.
    """

    def __init__(self, cfg: ClusterConfig, sched: Scheduler, banks: BankArray,
                 l2: L2Memory):
        self.cfg = cfg
        self.sched = sched
        self.banks = banks
        self.l2 = l2
        self.queue: list[DmaJob] = []
        self.active: DmaJob | None = None
        self.bytes_to_l1 = 0
        self.bytes_to_l2 = 0
        self.beats_moved = 0
        self.busy_cycles = 0
        self.jobs_done = 0
        self._lanes_pending = 0

    def program(self, job: DmaJob) -> None:
        job.status = "queued"
        self.queue.append(job)
        if self.active is None:
            self.sched.at(self.sched.now, PHASE_DELIVER, self._launch)

    def _launch(self) -> None:
        if self.active is not None or not self.queue:
            return
        job = self.queue.pop(0)
        self.active = job
        job.status = "running"
        job.start_cycle = self.sched.now
        cfg = self.cfg
        l1_base = job.dst if job.to_l1 else job.src
        nbeats = -(-job.length // 64)
        if l1_base % 64 or l1_base < 0 or l1_base + nbeats * 64 > cfg.l1_bytes:
            self._finish(job, fault=True)
            return

        beats = l1_base + 64 * np.arange(nbeats, dtype=np.int64)
        tiles = cfg.tiles_of_addrs(beats)
        lanes = tiles // cfg.tiles_per_subgroup
        t0 = self.sched.now + cfg.l2_latency
        self._lanes_pending = 0
        for lane in np.unique(lanes):
            lane_beats = beats[lanes == lane]
            self._lanes_pending += 1
            self._lane_step(job, lane_beats, 0, t0)

    def _lane_step(self, job: DmaJob, lane_beats: np.ndarray, pos: int,
                   cycle: int) -> None:
        """Advance one lane by one beat per cycle, slipping on bank conflicts."""
        if self.sched.now < cycle:
            self.sched.at(cycle, PHASE_ISSUE, lambda: self._lane_step(job, lane_beats, pos, cycle))
            return
        grants = self.banks.book_span(int(lane_beats[pos]), 16, cycle)
        nxt = int(grants.max()) + 1
        self.beats_moved += 1
        pos += 1
        if pos < lane_beats.size:
            self.sched.at(nxt, PHASE_ISSUE,
                          lambda: self._lane_step(job, lane_beats, pos, nxt))
        else:
            self._lanes_pending -= 1
            if self._lanes_pending == 0:
                self.sched.at(nxt, PHASE_DELIVER, lambda: self._finish(job))

    def _finish(self, job: DmaJob, fault: bool = False) -> None:
        job.status = "fault" if fault else "done"
        job.done_cycle = self.sched.now
        if not fault:
            if job.to_l1:
                self.bytes_to_l1 += job.length
            else:
                self.bytes_to_l2 += job.length
            self.busy_cycles += job.done_cycle - job.start_cycle
            self.jobs_done += 1
            if job.mirror:
                if job.to_l1:
                    self.banks.write_bytes(job.dst, self.l2.read_bytes(job.src, job.length))
                else:
                    self.l2.write_bytes(job.dst, self.banks.read_bytes(job.src, job.length))
        self.active = None
        self.sched.progress()
        if job.on_done is not None:
            job.on_done(job)
        if self.queue:
            self.sched.at(self.sched.now, PHASE_DELIVER, self._launch)


def dma_floor_cycles(cfg: ClusterConfig, length: int, lanes: int | None = None) -> int:
    """Closed-form lower bound on striped-transfer cycles (per direction)."""
    n = lanes if lanes is not None else cfg.total_subgroups
    return math.ceil(-(-length // 64) / n) + cfg.l2_latency
