"""Discrete-event memory-hierarchy simulator with persistent-memory crash semantics.

Warps execute on the shared SIMT interpreter; their global memory traffic goes
through :class:`Machine`, which models a write-evict L1 per SM, a partitioned
write-back write-allocate L2 with dirty bits, one FIFO write-pending queue per
memory controller and an NVM image. Functional values live in one coherent
image (the L2 is the coherence point); what reaches the persistence domain is
tracked separately as a :class:`DurabilityTrace`.

Every processed event (warp op, WPQ insertion, WPQ drain, host step, CTA end,
pcommit completion) gets the next event index; a crash after event ``k``
keeps exactly the trace entries with index <= ``k``.
"""

from __future__ import annotations

import heapq
from collections import OrderedDict, deque
from dataclasses import dataclass, field

from gpupm.lang.cfg import Op
from gpupm.lang.ir import (
    Alloc, Consume, Flag, GridConfig, HostOp, Launch, Load, MemcpyD2D, Program, Scope, SetFlag,
    Store,
)
from gpupm.memsim.config import MachineConfig
from gpupm.memsim.trace import DurabilityTrace, TraceEntry
from gpupm.refexec.image import MemoryImage, is_aux, region_of
from gpupm.refexec.interp import (
    Cta, ExecFault, KernelExec, Warp, atomic_apply, launch_contexts, prepare_image,
)


class SimInvariantError(AssertionError):
    """An instruction postcondition of the simulator itself failed."""


# warp-independent events run before warp steps scheduled for the same cycle
_P_MEM, _P_WARP, _P_HOST = 0, 1, 2
_M64 = (1 << 64) - 1


def mix(*vals: int) -> int:
    """Deterministic 64-bit hash (splitmix64 steps) used for seeded scheduling choices."""
    h = 0x9E3779B97F4A7C15
    for v in vals:
        h = (h ^ (v & _M64)) * 0xBF58476D1CE4E5B9 & _M64
        h = (h ^ (h >> 31)) * 0x94D049BB133111EB & _M64
        h ^= h >> 29
    return h


# ---------------------------------------------------------------- structures


class SetAssoc:
    """Set-associative LRU tag store keyed by line number."""

    def __init__(self, sets: int, assoc: int, stride: int = 1):
        self.sets = [OrderedDict() for _ in range(sets)]
        self.assoc = assoc
        self.stride = stride  # lines sharing a partition are ``stride`` apart

    def _set(self, line: int) -> OrderedDict:
        return self.sets[(line // self.stride) % len(self.sets)]

    def get(self, line: int, touch: bool = True):
        s = self._set(line)
        if line in s:
            if touch:
                s.move_to_end(line)
            return s[line]
        return None

    def insert(self, line: int, value):
        """Insert ``line``; returns the evicted ``(line, value)`` or None."""
        s = self._set(line)
        victim = None
        if line not in s and len(s) >= self.assoc:
            victim = s.popitem(last=False)
        s[line] = value
        s.move_to_end(line)
        return victim

    def discard(self, line: int) -> None:
        self._set(line).pop(line, None)

    def items(self):
        for s in self.sets:
            yield from s.items()

    def clear(self) -> None:
        for s in self.sets:
            s.clear()


@dataclass
class L2Line:
    dirty: bool = False


class Layout:
    """Line-aligned placement of arrays: program data first, then auxiliary regions."""

    def __init__(self, sizes: dict[str, int], words_per_line: int, line_size: int):
        self.wpl = words_per_line
        self.line_size = line_size
        self.base: dict[str, int] = {}
        self.owner: dict[int, str] = {}
        nxt = 0
        for name in sorted(sizes, key=lambda n: (is_aux(n), n)):
            self.base[name] = nxt
            lines = max(1, -(-sizes[name] // words_per_line))
            for ln in range(nxt, nxt + lines):
                self.owner[ln] = name
            nxt += lines
        self.flag_base = nxt
        self.flag_lines: dict[str, int] = {}

    def line(self, name: str, idx: int) -> int:
        return self.base[name] + idx // self.wpl

    def words(self, line: int, size: int) -> range:
        name = self.owner[line]
        first = (line - self.base[name]) * self.wpl
        return range(first, min(first + self.wpl, size))

    def addr(self, line: int) -> int:
        return line * self.line_size

    def flag_line(self, flag: str) -> int:
        if flag not in self.flag_lines:
            self.flag_lines[flag] = self.flag_base + len(self.flag_lines)
        return self.flag_lines[flag]


@dataclass(eq=False)
class Pending:
    """A line write travelling through a memory controller's WPQ."""

    uid: int
    line: int
    array: str
    words: tuple
    cause: str
    cta: int
    warp: int
    controller: int
    insert: int
    drain: int


@dataclass
class Controller:
    queue: deque = field(default_factory=deque)  # inserted, not yet drained
    drains: list = field(default_factory=list)  # drain time of every scheduled entry
    last_insert: int = 0
    last_drain: int = 0


@dataclass
class SimStats:
    cycles: int = 0
    events: int = 0
    nvm_line_writes: int = 0
    data_line_writes: int = 0
    log_line_writes: int = 0
    meta_line_writes: int = 0
    log_bytes: int = 0
    host_flag_writes: int = 0
    wt_count: int = 0
    clwb_count: int = 0
    clwb_clean: int = 0
    l2wb_count: int = 0
    pcommit_count: int = 0
    sfence_count: int = 0
    evictions: int = 0
    l1_hits: int = 0
    l2_hits: int = 0
    l2_misses: int = 0
    l2wb_checks: int = 0
    pcommit_checks: int = 0

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(vars(self).items()))


@dataclass
class LaunchProfile:
    index: int
    kernel: str
    start: int
    end: int = 0
    cta_cycles: dict = field(default_factory=dict)  # ctaid -> cycles

    @property
    def cycles(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Boundary:
    """Undurable prior stores seen at a persist boundary (loop iteration end or CTA end)."""

    kind: str  # loop | cta
    launch: int
    cta: int
    warp: int
    iteration: int
    undurable: int


@dataclass
class StoreRec:
    sid: int
    array: str
    index: int
    line: int


# ---------------------------------------------------------------- machine


class Machine:
    def __init__(self, program: Program, grid: GridConfig, cfg: MachineConfig,
                 image: MemoryImage, seed: int = 0):
        self.program = program
        self.grid = grid
        self.cfg = cfg
        self.seed = seed
        self.start_image = prepare_image(program, grid, image)
        self.arch = self.start_image.copy()
        self.nvm = self.start_image.copy()
        sizes = {k: len(v) for k, v in self.arch.arrays.items()}
        self.sizes = sizes
        self.layout = Layout(sizes, cfg.words_per_line, cfg.line_size)
        self.l1 = [SetAssoc(cfg.l1_sets, cfg.l1_assoc) for _ in range(cfg.num_sms)]
        self.l2 = [SetAssoc(cfg.l2_sets, cfg.l2_assoc, cfg.l2_partitions)
                   for _ in range(cfg.l2_partitions)]
        self.ctl = [Controller() for _ in range(cfg.num_controllers)]
        self.l2_blocked = 0
        self.trace = DurabilityTrace()
        self.stats = SimStats()
        self.heap: list = []
        self.seq = 0
        self.event = 0
        self.uid = 0
        self.undrained: set[int] = set()
        self.line_insert: dict[int, int] = {}  # line -> WPQ arrival of its latest writeback
        # store ids: per-word latest write, durable high-water mark, durability events
        self.next_sid = 1
        self.word_sid: dict[tuple[str, int], int] = {}
        self.durable_sid: dict[tuple[str, int], int] = {}
        self.trace_sid: dict[tuple[str, int], int] = {}
        self.word_waiting: dict[tuple[str, int], list[int]] = {}
        self.dur_event: dict[int, int] = {}
        self.thread_stores: dict[tuple[int, int, int], list[StoreRec]] = {}
        self.warp_unpersisted: dict[tuple[int, int], list[StoreRec]] = {}
        self.cta_unpersisted: dict[tuple[int, int], list[StoreRec]] = {}
        self.boundaries: list[Boundary] = []
        self.atomicity_violations: list[str] = []
        self.launches: list[LaunchProfile] = []
        # host and kernel progress
        self.ctxs = launch_contexts(program, grid)
        self.host_steps = list(program.host.steps)
        self.host_pc = 0
        self.launch_no = 0
        self.kernel: _KernelRun | None = None
        self.done = False

    # ------------------------------------------------------------ event queue
    def push(self, time: int, prio: int, kind: str, payload=None, tie: int = 0) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (time, prio, tie, self.seq, kind, payload))

    def run(self, crash_at: int | None = None) -> bool:
        """Process events; returns True if stopped by ``crash_at`` before the end."""
        if crash_at is not None and crash_at <= 0:
            return bool(self.heap) or not self.done
        if not self.heap and not self.done:
            self.push(0, _P_HOST, "host")
        while self.heap:
            time, _, _, _, kind, payload = heapq.heappop(self.heap)
            self.event += 1
            getattr(self, "_ev_" + kind)(time, payload)
            if crash_at is not None and self.event >= crash_at:
                return bool(self.heap)
        return False

    # ------------------------------------------------------------ mapping helpers
    def partition(self, line: int) -> int:
        return line % self.cfg.l2_partitions

    def controller(self, line: int) -> int:
        return self.partition(line) // self.cfg.banks_per_controller

    def l2_get(self, line: int, touch: bool = True) -> L2Line | None:
        return self.l2[self.partition(line)].get(line, touch)

    def l2_fill(self, line: int, t: int, dirty: bool, warp: Warp | None) -> None:
        victim = self.l2[self.partition(line)].insert(line, L2Line(dirty))
        if victim is not None and victim[1].dirty:
            self.stats.evictions += 1
            self.enqueue(t, victim[0], self.line_words(victim[0]), "eviction", warp)

    def line_words(self, line: int) -> tuple:
        name = self.layout.owner[line]
        arr = self.arch.arrays[name]
        return tuple((i, arr[i], self.word_sid.get((name, i), 0))
                     for i in self.layout.words(line, len(arr)))

    def invalidate_l1(self, line: int) -> None:
        for c in self.l1:
            c.discard(line)

    def l2_start(self, t: int) -> int:
        return max(t, self.l2_blocked)

    def new_sid(self, warp: Warp | None, tid: int, name: str, idx: int) -> int:
        sid = self.next_sid
        self.next_sid += 1
        key = (name, idx)
        self.word_sid[key] = sid
        self.word_waiting.setdefault(key, []).append(sid)
        if warp is not None:
            rec = StoreRec(sid, name, idx, self.layout.line(name, idx))
            kr = self.kernel
            self.thread_stores.setdefault((kr.index, warp.cta.ctaid, tid), []).append(rec)
            self.warp_unpersisted.setdefault(_wkey(warp), []).append(rec)
            self.cta_unpersisted.setdefault((kr.index, warp.cta.ctaid), []).append(rec)
        return sid

    # ------------------------------------------------------------ WPQ
    def enqueue(self, capture: int, line: int, words: tuple, cause: str,
                warp: Warp | None) -> Pending:
        cfg = self.cfg
        ci = self.controller(line)
        q = self.ctl[ci]
        t = max(capture, q.last_insert)
        n = len(q.drains)
        if n >= cfg.wpq_depth:
            t = max(t, q.drains[n - cfg.wpq_depth])
        drain = max(t, q.last_drain) + cfg.mem_write
        q.last_insert, q.last_drain = t, drain
        q.drains.append(drain)
        self.uid += 1
        cta = warp.cta.ctaid if warp is not None else -1
        wid = warp.wid if warp is not None else -1
        p = Pending(self.uid, line, self.layout.owner[line], words, cause, cta, wid, ci, t, drain)
        self.undrained.add(p.uid)
        self.line_insert[line] = t
        self.push(t, _P_MEM, "insert", p)
        self.push(drain, _P_MEM, "drain", p)
        return p

    def _ev_insert(self, time: int, p: Pending) -> None:
        self.ctl[p.controller].queue.append(p)
        if self.cfg.wpq_durable:
            self.record(p, "wpq")

    def _ev_drain(self, time: int, p: Pending) -> None:
        q = self.ctl[p.controller].queue
        if not q or q[0] is not p:
            raise SimInvariantError("WPQ drained out of FIFO order")
        q.popleft()
        self.undrained.discard(p.uid)
        arr = self.nvm.arrays[p.array]
        for i, v, _ in p.words:
            arr[i] = v
        if not self.cfg.wpq_durable:
            self.record(p, "nvm")

    def record(self, p: Pending, stage: str) -> None:
        e = TraceEntry(self.event, self.layout.addr(p.line), p.cause, stage, p.cta, p.warp,
                       p.array, p.words)
        self.trace.append(e)
        st = self.stats
        st.nvm_line_writes += 1
        region = region_of(p.array)
        setattr(st, f"{region}_line_writes", getattr(st, f"{region}_line_writes") + 1)
        if region == "log":
            st.log_bytes += len(p.words) * self.cfg.word_size
        for i, _, sid in p.words:
            key = (p.array, i)
            if sid < self.trace_sid.get(key, 0):
                self.atomicity_violations.append(
                    f"event {self.event}: {p.array}[{i}] store {sid} persisted after "
                    f"store {self.trace_sid[key]}")
            self.trace_sid[key] = max(sid, self.trace_sid.get(key, 0))
            if sid > self.durable_sid.get(key, 0):
                self.durable_sid[key] = sid
            waiting = self.word_waiting.get(key)
            while waiting and waiting[0] <= sid:
                self.dur_event[waiting.pop(0)] = self.event

    def is_durable(self, rec: StoreRec) -> bool:
        return self.durable_sid.get((rec.array, rec.index), 0) >= rec.sid

    def persistent_image(self) -> MemoryImage:
        """NVM contents, plus pending durable-WPQ entries when the WPQs are durable."""
        img = self.nvm.copy()
        if self.cfg.wpq_durable:
            for q in self.ctl:
                for p in q.queue:
                    arr = img.arrays[p.array]
                    for i, v, _ in p.words:
                        arr[i] = v
        return img

    # ------------------------------------------------------------ memory port
    def size(self, name: str) -> int:
        return self.sizes[name]

    def _lines(self, name: str, reqs) -> dict[int, list]:
        out: dict[int, list] = {}
        for r in reqs:
            out.setdefault(self.layout.line(name, r[1]), []).append(r)
        return out

    def load(self, warp: Warp, name: str, reqs):
        t = warp.clock
        sm = self.kernel.sm_of[warp.cta.ctaid]
        done = t
        for line in self._lines(name, reqs):
            if self.l1[sm].get(line) is not None:
                self.stats.l1_hits += 1
                done = max(done, t + self.cfg.lat_l1)
                continue
            start = self.l2_start(t)
            if self.l2_get(line) is not None:
                self.stats.l2_hits += 1
                fin = start + self.cfg.lat_l2
            else:
                self.stats.l2_misses += 1
                fin = start + self.cfg.lat_l2 + self.cfg.mem_read
                self.l2_fill(line, start, False, warp)
            self.l1[sm].insert(line, True)
            done = max(done, fin)
        warp.clock = done
        arr = self.arch.arrays[name]
        return [arr[i] for _, i in reqs]

    def store(self, warp: Warp, name: str, reqs, wt: bool) -> None:
        t = warp.clock
        arr = self.arch.arrays[name]
        for line, rs in self._lines(name, reqs).items():
            self.invalidate_l1(line)
            start = self.l2_start(t)
            stored = []
            for lane, i, v in rs:
                arr[i] = v
                stored.append((i, v, self.new_sid(warp, lane.tid, name, i)))
            cached = self.l2_get(line)
            if wt:
                self.stats.wt_count += 1
                if cached is not None and cached.dirty:
                    words = self.line_words(line)
                    cached.dirty = False
                else:
                    words = _dedupe(stored)
                p = self.enqueue(start + self.cfg.lat_l2, line, words, "wt", warp)
                warp.pending.append(p.drain)
                continue
            if cached is not None:
                self.stats.l2_hits += 1
                cached.dirty = True
                warp.pending.append(start + self.cfg.lat_l2)
            else:
                self.stats.l2_misses += 1
                self.l2_fill(line, start, True, warp)
                warp.pending.append(start + self.cfg.lat_l2 + self.cfg.mem_read)

    def atomic(self, warp: Warp, op: str, name: str, reqs) -> None:
        t = warp.clock
        arr = self.arch.arrays[name]
        for line, rs in self._lines(name, reqs).items():
            self.invalidate_l1(line)
            start = self.l2_start(t)
            for lane, i, v in rs:
                arr[i] = atomic_apply(op, arr[i], v)
                self.new_sid(warp, lane.tid, name, i)
            cached = self.l2_get(line)
            if cached is not None:
                cached.dirty = True
                warp.pending.append(start + self.cfg.lat_l2)
            else:
                self.l2_fill(line, start, True, warp)
                warp.pending.append(start + self.cfg.lat_l2 + self.cfg.mem_read)

    def clwb(self, warp: Warp, name: str, reqs) -> None:
        t = warp.clock
        for line in self._lines(name, reqs):
            self.stats.clwb_count += 1
            start = self.l2_start(t)
            cached = self.l2_get(line, touch=False)
            if cached is not None and cached.dirty:
                cached.dirty = False
                p = self.enqueue(start + self.cfg.lat_l2, line, self.line_words(line), "clwb",
                                 warp)
                warp.pending.append(p.insert)
            else:
                # a clean line may still have a writeback in flight from another request
                self.stats.clwb_clean += 1
                warp.pending.append(max(start + self.cfg.lat_l2, self.line_insert.get(line, 0)))

    def persist_op(self, warp: Warp, op: str) -> None:
        if op == "sfence":
            self.stats.sfence_count += 1
            warp.clock = max([warp.clock] + warp.pending)
            warp.pending.clear()
        elif op == "l2wb":
            warp.pending.append(self.l2wb(warp.clock, warp))
        elif op == "pcommit":
            warp.pending.append(self.pcommit(warp.clock))
        else:
            raise ExecFault(f"unknown persist op {op!r}")

    # ------------------------------------------------------------ whole-cache ops
    def l2wb(self, t: int, warp: Warp | None) -> int:
        """Write back every dirty L2 line; returns the acknowledgement time."""
        cfg = self.cfg
        self.stats.l2wb_count += 1
        start = self.l2_start(t)
        ack = start + cfg.lat_l2 + cfg.l2_lines_per_partition * cfg.l2wb_scan_per_line
        for part in self.l2:
            dirty = sorted(line for line, st in part.items() if st.dirty)
            for k, line in enumerate(dirty):
                part.get(line, touch=False).dirty = False
                cap = start + cfg.lat_l2 + k * cfg.l2wb_scan_per_line
                p = self.enqueue(cap, line, self.line_words(line), "l2wb", warp)
                ack = max(ack, p.insert)
        self.l2_blocked = start + cfg.lat_l2 + cfg.l2_lines_per_partition * cfg.l2wb_scan_per_line
        # lines written back earlier by other requests must have reached their WPQ too
        ack = max([ack] + [q.last_insert for q in self.ctl])
        left = sum(1 for part in self.l2 for _, st in part.items() if st.dirty)
        self.stats.l2wb_checks += 1
        if left:
            raise SimInvariantError(f"{left} dirty L2 lines remain after l2wb")
        return ack

    def pcommit(self, t: int) -> int:
        """Drain all WPQs; a completion event audits that the covered entries left the queues."""
        self.stats.pcommit_count += 1
        if self.cfg.wpq_durable:
            return t
        ack = max([t] + [q.last_drain for q in self.ctl])
        self.push(ack, _P_MEM, "pcommit_done", self.uid)
        return ack

    def _ev_pcommit_done(self, time: int, marker: int) -> None:
        self.stats.pcommit_checks += 1
        covered = [u for u in self.undrained if u <= marker]
        if covered:
            raise SimInvariantError(f"{len(covered)} WPQ entries still pending after pcommit")

    # ------------------------------------------------------------ host script
    def _ev_host(self, time: int, _=None) -> None:
        if self.host_pc >= len(self.host_steps):
            self.done = True
            self.stats.cycles = time
            return
        step = self.host_steps[self.host_pc]
        self.host_pc += 1
        cfg = self.cfg
        nxt = time + cfg.host_step_cycles
        if isinstance(step, Launch):
            self.start_kernel(time)
            return
        if isinstance(step, SetFlag):
            self.set_flag(step.flag, step.value)
        elif isinstance(step, MemcpyD2D):
            nxt = max(nxt, self.memcpy(time, step))
        elif isinstance(step, HostOp):
            if step.op == "l2wb":
                nxt = max(nxt, self.l2wb(time, None))
            elif step.op == "pcommit":
                nxt = max(nxt, self.pcommit(time))
            elif step.op != "sync":
                raise ExecFault(f"unknown host op {step.op!r}")
        elif not isinstance(step, (Alloc, Consume)):
            raise ExecFault(f"unknown host step {step!r}")
        self.push(nxt, _P_HOST, "host")

    def set_flag(self, flag: str, value: Flag) -> None:
        """Host flags live in host persistent memory: durable as soon as written."""
        value = Flag(value)
        self.arch.flags[flag] = value
        self.nvm.flags[flag] = value
        line = self.layout.flag_line(flag)
        self.trace.append(TraceEntry(self.event, self.layout.addr(line), "host", "nvm", -1, -1,
                                     flag=(flag, value)))
        self.stats.host_flag_writes += 1

    def memcpy(self, t: int, step: MemcpyD2D) -> int:
        src, dst = self.arch.arrays[step.src], self.arch.arrays[step.dst]
        if step.start < 0 or step.start + step.count > min(len(src), len(dst)):
            raise ExecFault(f"memcpy {step.src}->{step.dst} out of bounds")
        done = t
        by_line: dict[int, list] = {}
        for i in range(step.start, step.start + step.count):
            dst[i] = src[i]
            sid = self.new_sid(None, -1, step.dst, i)
            by_line.setdefault(self.layout.line(step.dst, i), []).append((i, dst[i], sid))
        start = self.l2_start(t)
        for line, words in by_line.items():
            self.invalidate_l1(line)
            cached = self.l2_get(line, touch=False)
            if cached is not None and cached.dirty:
                words = list(self.line_words(line))
                cached.dirty = False
            p = self.enqueue(start + self.cfg.lat_l2, line, tuple(words), "host", None)
            done = max(done, p.drain)
        return done

    # ------------------------------------------------------------ kernels
    def start_kernel(self, t: int) -> None:
        ctx = self.ctxs[self.launch_no]
        self.launch_no += 1
        for c in self.l1:
            c.clear()
        ex = ctx.executor(self)
        self.kernel = _KernelRun(ctx.index, ex, ctx.grid, t + self.cfg.launch_cycles)
        self.launches.append(LaunchProfile(ctx.index, ctx.kernel.name, t))
        slots = self.cfg.num_sms * self.cfg.max_ctas_per_sm
        for slot in range(min(slots, ctx.grid.grid_dim)):
            self.start_cta(slot, self.kernel.t0)

    def start_cta(self, slot: int, t: int) -> None:
        kr = self.kernel
        ctaid = kr.next_cta
        kr.next_cta += 1
        cta = kr.ex.make_cta(ctaid)
        kr.sm_of[ctaid] = slot // self.cfg.max_ctas_per_sm
        kr.slot_of[ctaid] = slot
        kr.cta_start[ctaid] = t
        kr.live[ctaid] = cta
        for w in cta.warps:
            w.clock = t
            w.order = 0
            self.push_warp(w)

    def push_warp(self, w: Warp) -> None:
        kr = self.kernel
        kr.queued.add(_wkey(w))
        self.push(w.clock, _P_WARP, "warp", w, mix(self.seed, kr.index, w.cta.ctaid, w.wid))

    def _ev_warp(self, time: int, w: Warp) -> None:
        kr = self.kernel
        kr.queued.discard(_wkey(w))
        w.clock = max(w.clock, time)
        t0 = w.clock
        op = kr.ex.step(w)
        if op is not None:
            cost = self.cfg.issue_cycles + self._jitter(w)
            if _is_shared(op):
                cost += self.cfg.shared_latency
            w.clock = max(w.clock, t0) + cost
            w.order += 1
            if op.kind == "loop_step" and _epoch_loop(op):
                self.loop_boundary(w, op)
            self.push_warp(w)
            return
        self.warp_blocked(w)

    def _jitter(self, w: Warp) -> int:
        j = self.cfg.jitter
        if not j:
            return 0
        return mix(self.seed, self.kernel.index, w.cta.ctaid, w.wid, w.order) % (j + 1)

    def warp_blocked(self, w: Warp) -> None:
        kr = self.kernel
        cta = w.cta
        if all(l.state == "done" for l in w.lanes):
            kr.finish[_wkey(w)] = max([w.clock] + w.pending)
            if all(_wkey(x) in kr.finish for x in cta.warps):
                end = max(kr.finish[_wkey(x)] for x in cta.warps)
                self.push(end, _P_WARP, "cta_end", cta)
            return
        if kr.ex.check_barrier(cta):
            release = max(x.clock for x in cta.warps) + self.cfg.issue_cycles
            for x in cta.warps:
                if any(l.state == "run" for l in x.lanes):
                    x.clock = max(x.clock, release)
                    if _wkey(x) not in kr.queued:
                        self.push_warp(x)

    def loop_boundary(self, w: Warp, op: Op) -> None:
        recs = self.warp_unpersisted.get(_wkey(w), [])
        left = [r for r in recs if not self.is_durable(r)]
        self.warp_unpersisted[_wkey(w)] = left
        it = w.lanes[0].regs.get(op.stmt.var, 0)
        self.boundaries.append(Boundary("loop", self.kernel.index, w.cta.ctaid, w.wid, it,
                                        len(left)))

    def _ev_cta_end(self, time: int, cta: Cta) -> None:
        kr = self.kernel
        recs = self.cta_unpersisted.pop((kr.index, cta.ctaid), [])
        left = sum(1 for r in recs if not self.is_durable(r))
        self.boundaries.append(Boundary("cta", kr.index, cta.ctaid, -1, -1, left))
        for w in cta.warps:
            self.warp_unpersisted.pop(_wkey(w), None)
        del kr.live[cta.ctaid]
        prof = self.launches[-1]
        prof.cta_cycles[cta.ctaid] = time - kr.cta_start[cta.ctaid]
        kr.end = max(kr.end, time)
        if kr.next_cta < kr.grid.grid_dim:
            self.start_cta(kr.slot_of[cta.ctaid], time)
        elif not kr.live:
            prof.end = kr.end
            self.push(kr.end, _P_HOST, "host")


@dataclass
class _KernelRun:
    index: int
    ex: KernelExec
    grid: GridConfig
    t0: int
    next_cta: int = 0
    end: int = 0
    sm_of: dict = field(default_factory=dict)
    slot_of: dict = field(default_factory=dict)
    cta_start: dict = field(default_factory=dict)
    live: dict = field(default_factory=dict)
    finish: dict = field(default_factory=dict)
    queued: set = field(default_factory=set)


def _wkey(w: Warp) -> tuple[int, int]:
    """Stable warp identity within a launch (object ids are reused once CTAs retire)."""
    return (w.cta.ctaid, w.wid)


def _dedupe(words: list) -> tuple:
    """Last write per word wins (one warp instruction may hit a word twice)."""
    out: dict[int, tuple] = {}
    for w in words:
        out[w[0]] = w
    return tuple(out[i] for i in sorted(out))


def _is_shared(op: Op) -> bool:
    s = op.stmt
    return op.kind == "stmt" and isinstance(s, (Load, Store)) and s.space == "shared"


def _epoch_loop(op: Op) -> bool:
    d = op.stmt.directive
    return d is not None and d.scope is Scope.LOOP
