"""Cycle-level tensor engine: FMA array, latency-tolerant streamer, Z FIFO.

The engine computes Z = Y + X*W as a sequence of output-tile passes.  One
pass covers up to R rows by C*(P+1) columns and sweeps the full dot length;
every 4-cycle macro-step consumes one 512-bit W word (one k-slice of the
tile's columns) and performs R*C*(P+1) MACs.  X arrives in chunks of 32
k-elements per row (one wide word per row per chunk), Y preloads one tile
ahead, and finished tiles drain through the Z FIFO as wide writes.

The streamer shares the tile's single wide port: at most one request issues
per cycle, fixed priority W > X > Y > Z.  Each read stream owns a 16-entry
ROB: responses may assemble out of order, but words are committed to the
stream buffer strictly in issue order, one per cycle.  Functional operand
data is keyed by commit order, so a reordering bug corrupts the numeric
result rather than hiding.

W and X address generators reconfigure at each pass boundary: prefetch for
the next pass starts only once the last macro-step of the current pass has
issued.  The resulting per-pass fetch bubble is what amortizes away on
large problems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ClusterConfig
from .engine import PHASE_DELIVER, PHASE_ISSUE, Scheduler
from .interconnect import Fabric, Txn, WIDE_READ, WIDE_WRITE


class TeBusyError(RuntimeError):
    """Programming attempted while the engine is running."""


@dataclass
class TeConfigRegs:
    """Register-level view of one GEMM job as written by a PE."""

    x_base: int
    w_base: int
    y_base: int
    z_base: int
    m: int
    n: int
    k: int
    w_col_start: int = 0
    loopback: bool = True
    x_row_stride: int = 0
    w_row_stride: int = 0
    y_row_stride: int = 0
    z_row_stride: int = 0

    def __post_init__(self):
        if min(self.m, self.n, self.k) <= 0:
            raise ValueError("matrix dims must be positive")
        if not 0 <= self.w_col_start < self.n:
            raise ValueError("w_col_start out of range")

    @property
    def register_count(self) -> int:
        return 12


class PassPlan:
    """Addresses and functional operand blocks for one output-tile pass."""

    __slots__ = ("nr", "ncols", "k", "nchunks", "w_addrs", "x_addrs",
                 "y_addrs", "z_addrs", "w_block", "x_flat", "y_block",
                 "writeback", "mirror")

    def __init__(self, nr, ncols, k, w_addrs, x_addrs, y_addrs, z_addrs,
                 w_block, x_flat, y_block, writeback, mirror=True):
        self.nr = nr
        self.ncols = ncols
        self.k = k
        self.nchunks = -(-k // 32)
        self.w_addrs = w_addrs
        self.x_addrs = x_addrs
        self.y_addrs = y_addrs
        self.z_addrs = z_addrs
        self.w_block = w_block      # [k, ncols] fp16
        self.x_flat = x_flat        # [nchunks*nr, 32] fp16, chunk-major
        self.y_block = y_block      # [nr, ncols] fp16
        self.writeback = writeback  # callable(z_f16 [nr, ncols])
        self.mirror = mirror

    @property
    def macs(self) -> int:
        return self.nr * self.ncols * self.k


class TeTask:
    """An ordered list of passes plus the job-level completion callback."""

    def __init__(self, passes: list[PassPlan], regs: TeConfigRegs | None = None):
        if not passes:
            raise ValueError("task needs at least one pass")
        self.passes = passes
        self.regs = regs
        self.macs = sum(p.macs for p in passes)


_W, _X, _Y = 0, 1, 2
_STALL_NAMES = ("w", "x", "y", "z", "pipe")


class _Stream:
    """One read stream: issue cursor, ROB reassembly, commit FIFO."""

    __slots__ = ("sid", "rob_limit", "capacity", "addrs", "n", "cursor",
                 "in_flight", "committed", "consumed", "next_commit",
                 "pending", "times", "fifo", "last_commit", "issued_bytes")

    def __init__(self, sid, rob_limit):
        self.sid = sid
        self.rob_limit = rob_limit
        self.capacity = 0
        self.addrs = []          # flat list of word addresses across open passes
        self.n = 0
        self.cursor = 0
        self.in_flight = 0
        self.committed = 0
        self.consumed = 0
        self.next_commit = 0
        self.pending = {}        # seq -> assembly-complete cycle
        self.times = []          # commit cycle per word, in order
        self.fifo = []           # word seq per commit, in order
        self.last_commit = -1
        self.issued_bytes = 0

    def open_words(self, addrs) -> None:
        self.addrs.extend(int(a) for a in addrs)
        self.n = len(self.addrs)

    def can_issue(self) -> bool:
        return (self.cursor < self.n
                and self.in_flight < self.rob_limit
                and self.in_flight + (self.committed - self.consumed) < self.capacity)

    def on_assembled(self, seq: int, cycle: int) -> None:
        """ROB reorder point: commit in issue order, one word per cycle."""
        self.pending[seq] = cycle
        while self.next_commit in self.pending:
            t = self.pending.pop(self.next_commit)
            t = max(t, self.last_commit + 1)
            self.last_commit = t
            self.times.append(t)
            self.fifo.append(self.next_commit)
            self.committed += 1
            self.next_commit += 1


class TensorEngine:
    """One engine instance bound to its host tile."""

    def __init__(self, cfg: ClusterConfig, sched: Scheduler, fabric: Fabric,
                 banks, tile: int, te_id: int):
        self.cfg = cfg
        self.sched = sched
        self.fabric = fabric
        self.banks = banks
        self.tile = tile
        self.te_id = te_id
        self.initiator = cfg.pes_per_tile  # requestor slot at the tile arbiter
        self.running = False
        self.task: TeTask | None = None
        self.on_done = None
        # lifetime metrics
        self.macs_done = 0
        self.busy_cycles = 0
        self.stalls = dict.fromkeys(_STALL_NAMES, 0)
        self.issued = {"w": 0, "x": 0, "y": 0, "z": 0}
        self.bytes_issued = {"w": 0, "x": 0, "y": 0, "z": 0}
        self.program_cycle = -1
        self.done_cycle = -1
        self._reset_run_state()

    def _reset_run_state(self):
        self.streams = None
        self.pass_bases = None
        self.fetch_pass = -1
        self.y_pass = -1
        self.cp = 0
        self.steps_done = 0
        self.step_end = 0
        self.acc = None
        self.folded_chunks = 0
        self.z_fifo = []
        self.z_outstanding = 0
        self._issue_armed = False
        self._advance_armed = False
        self._z_blocked_pass = False

    # --- programming interface ----------------------------------------------

    def program(self, task: TeTask, on_done=None) -> None:
        """Accept a job; raises :class:`TeBusyError` while running."""
        if self.running:
            raise TeBusyError(f"te{self.te_id} busy")
        self.running = True
        self.task = task
        self.on_done = on_done
        self.program_cycle = self.sched.now
        self._reset_run_state()
        rob = self.cfg.rob_depth
        self.streams = [_Stream(_W, rob), _Stream(_X, rob), _Stream(_Y, rob)]
        self.pass_bases = [[0] * (len(task.passes) + 1) for _ in range(3)]
        self._open_fetch(0)
        self._open_y(0)
        self._arm_issue(self.sched.now)
        self._arm_advance(self.sched.now)

    # --- pass opening ---------------------------------------------------------

    def _open_fetch(self, p: int) -> None:
        """Release pass p to the W/X address generators."""
        if p >= len(self.task.passes):
            return
        self.fetch_pass = p
        plan = self.task.passes[p]
        sw, sx = self.streams[_W], self.streams[_X]
        self.pass_bases[_W][p] = sw.n
        self.pass_bases[_X][p] = sx.n
        sw.open_words(plan.w_addrs)
        sx.open_words(plan.x_addrs)
        self.pass_bases[_W][p + 1] = sw.n
        self.pass_bases[_X][p + 1] = sx.n
        # W window equals the ROB depth; X holds one chunk plus one prefetch
        sw.capacity = self.cfg.rob_depth
        sx.capacity = 2 * plan.nr
        self._arm_issue(self.sched.now)

    def _open_y(self, p: int) -> None:
        if p >= len(self.task.passes):
            return
        self.y_pass = p
        plan = self.task.passes[p]
        sy = self.streams[_Y]
        self.pass_bases[_Y][p] = sy.n
        sy.open_words(plan.y_addrs)
        self.pass_bases[_Y][p + 1] = sy.n
        sy.capacity = 2 * plan.nr
        self._arm_issue(self.sched.now)

    # --- issue side -----------------------------------------------------------

    def _arm_issue(self, cycle: int) -> None:
        if not self._issue_armed:
            self._issue_armed = True
            self.sched.at(max(cycle, self.sched.now), PHASE_ISSUE, self._issue_tick)

    def _issue_tick(self) -> None:
        self._issue_armed = False
        if not self.running:
            return
        if self._issue_one():
            self._arm_issue(self.sched.now + 1)

    def _issue_one(self) -> bool:
        names = ("w", "x", "y")
        for sid in (_W, _X, _Y):
            st = self.streams[sid]
            if st.can_issue():
                seq = st.cursor
                addr = st.addrs[seq]
                st.cursor += 1
                st.in_flight += 1
                st.issued_bytes += 64
                self.issued[names[sid]] += 1
                self.bytes_issued[names[sid]] += 64
                txn = Txn(WIDE_READ, addr, self.tile, self.cfg.tile_of_addr(addr),
                          self.initiator, self.fabric.next_tag(), self.sched.now,
                          beats=16,
                          on_commit=self._make_read_commit(sid, seq))
                self.fabric.route(txn)
                return True
        if self.z_fifo:
            addr = self.z_fifo.pop(0)
            self.z_outstanding += 1
            self.issued["z"] += 1
            self.bytes_issued["z"] += 64
            txn = Txn(WIDE_WRITE, addr, self.tile, self.cfg.tile_of_addr(addr),
                      self.initiator, self.fabric.next_tag(), self.sched.now,
                      beats=16, on_commit=self._z_commit)
            self.fabric.route(txn)
            if self._z_blocked_pass:
                self._arm_advance(self.sched.now)
            return True
        return False

    def _make_read_commit(self, sid: int, seq: int):
        def _commit(txn: Txn) -> None:
            st = self.streams[sid]
            st.in_flight -= 1
            st.on_assembled(seq, self.sched.now)
            self._arm_issue(self.sched.now)
            self._arm_advance(self.sched.now)
        return _commit

    def _z_commit(self, txn: Txn) -> None:
        self.z_outstanding -= 1
        if not self.running:
            return
        if self.cp >= len(self.task.passes) and not self.z_fifo \
                and self.z_outstanding == 0:
            self._finish()

    # --- FMA datapath ----------------------------------------------------------

    def _arm_advance(self, cycle: int) -> None:
        if not self._advance_armed:
            self._advance_armed = True
            self.sched.at(max(cycle, self.sched.now), PHASE_DELIVER, self._advance)

    def _advance(self) -> None:
        self._advance_armed = False
        if not self.running:
            return
        task = self.task
        now = self.sched.now
        while self.cp < len(task.passes):
            p = self.cp
            plan = task.passes[p]
            sw, sx, sy = self.streams
            wbase = self.pass_bases[_W][p]
            xbase = self.pass_bases[_X][p]
            ybase = self.pass_bases[_Y][p]
            nr = plan.nr

            if self.steps_done == 0:
                # accumulator init needs the full Y tile
                if sy.committed < ybase + nr:
                    self.stalls["y"] += 1
                    return
                y_ids = np.asarray(sy.fifo[ybase:ybase + nr]) - ybase
                self.acc = plan.y_block[y_ids % nr].astype(np.float32)
                y_ready = sy.times[ybase + nr - 1]
                start0 = max(self.step_end, y_ready, now)
                sy.consumed += nr
                self.folded_chunks = 0
                self._open_y(p + 1)
                self.step_end = start0  # first step may begin here

            progressed = False
            while self.steps_done < plan.k:
                s = self.steps_done
                if sw.committed <= wbase + s:
                    self.stalls["w"] += 1
                    break
                c = s // 32
                if sx.committed < xbase + min((c + 1) * nr, plan.nchunks * nr):
                    self.stalls["x"] += 1
                    break
                w_t = sw.times[wbase + s]
                x_t = sx.times[xbase + (c + 1) * nr - 1]
                start = max(self.step_end, w_t, x_t)
                if s == plan.k - 1:
                    self._open_fetch(p + 1)
                self.step_end = start + 4
                self.steps_done += 1
                self.macs_done += nr * plan.ncols
                sw.consumed += 1
                progressed = True
                end_of_chunk = (s + 1) % 32 == 0 or s + 1 == plan.k
                if end_of_chunk:
                    self._fold_chunk(plan, c, wbase, xbase)
                    sx.consumed += nr
            if progressed:
                self._arm_issue(now)
            if self.steps_done < plan.k:
                return

            # pass complete: flush pipeline, push Z tile through the FIFO
            if len(self.z_fifo) + nr > self.cfg.z_fifo_depth:
                self.stalls["z"] += 1
                self._z_blocked_pass = True
                return
            self._z_blocked_pass = False
            flush = self.step_end + self.cfg.te_pipeline
            z16 = self.acc.astype(np.float16)
            plan.writeback(z16)
            if plan.mirror:
                self.banks.scatter_rows(plan.z_addrs, z16.view(np.uint8))
            self.z_fifo.extend(int(a) for a in plan.z_addrs)
            self.step_end = flush
            self.cp += 1
            self.steps_done = 0
            self._arm_issue(now)
            self.sched.progress()

        if self.cp >= len(task.passes) and not self.z_fifo and self.z_outstanding == 0:
            self._finish()

    def _fold_chunk(self, plan: PassPlan, c: int, wbase: int, xbase: int) -> None:
        sw, sx = self.streams[_W], self.streams[_X]
        nr = plan.nr
        kc = min(32, plan.k - 32 * c)
        w_ids = np.asarray(sw.fifo[wbase + 32 * c: wbase + 32 * c + kc]) - wbase
        x_ids = np.asarray(sx.fifo[xbase + c * nr: xbase + (c + 1) * nr]) - xbase
        nwords = plan.nchunks * nr
        xc = plan.x_flat[x_ids % nwords].astype(np.float32)      # [nr, 32]
        wc = plan.w_block[w_ids % plan.k].astype(np.float32)     # [kc, ncols]
        self.acc += xc[:, :kc] @ wc

    def _finish(self) -> None:
        self.running = False
        self.done_cycle = max(self.sched.now, self.step_end)
        self.busy_cycles += self.done_cycle - self.program_cycle
        self.sched.progress()
        if self.on_done is not None:
            done, self.on_done = self.on_done, None
            if self.done_cycle > self.sched.now:
                self.sched.at(self.done_cycle, PHASE_DELIVER, lambda: done(self))
            else:
                done(self)

    # --- reporting --------------------------------------------------------------

    def utilization(self, cycles: int | None = None) -> float:
        span = cycles if cycles is not None else self.busy_cycles
        if span <= 0:
            return 0.0
        return self.macs_done / (self.cfg.te_macs_per_cycle * span)
