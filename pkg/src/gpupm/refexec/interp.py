"""SIMT interpreter shared by the reference oracle and the timing simulator.

Each thread (lane) has its own registers and program counter over the flat
code produced by :func:`gpupm.lang.cfg.lower`. A warp step executes the op at
the smallest pending PC for every lane sitting on it, which keeps warps in
lockstep and reconverges them after structured branches. Global memory goes
through a pluggable port; shared memory is owned by the CTA.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

from gpupm.lang.cfg import FlatCode, Op, lower
from gpupm.lang.ir import (
    Assign, Atomic, BinOp, Call, Clwb, Const, DeviceDecl, Expr, GridConfig, KernelProgram,
    Launch, Load, Neg, Program, Simple, Store, Var,
)
from gpupm.refexec.image import MemoryImage, is_aux

MASK = 0xFFFFFFFF


class ExecFault(Exception):
    """Runtime fault (out-of-bounds access, barrier divergence, bad loop step)."""

    def __init__(self, msg: str, ctaid: int | None = None, tid: int | None = None):
        self.ctaid = ctaid
        self.tid = tid
        where = f" (cta {ctaid}, thread {tid})" if ctaid is not None else ""
        super().__init__(msg + where)


def wrap(v: int) -> int:
    """Reduce to a signed 32-bit value."""
    v &= MASK
    return v - 0x100000000 if v & 0x80000000 else v


def _div(a: int, b: int) -> int:
    if b == 0:
        raise ZeroDivisionError("division by zero")
    q = abs(a) // abs(b)
    return wrap(q if (a >= 0) == (b >= 0) else -q)


def _mod(a: int, b: int) -> int:
    return wrap(a - _div(a, b) * b)


def _shl(a: int, b: int) -> int:
    return wrap(a << (b & 31))


def _shr(a: int, b: int) -> int:
    return a >> (b & 31)


def binop(op: str, a: int, b: int) -> int:
    if op == "+":
        return wrap(a + b)
    if op == "-":
        return wrap(a - b)
    if op == "*":
        return wrap(a * b)
    if op == "/":
        return _div(a, b)
    if op == "%":
        return _mod(a, b)
    if op == "<<":
        return _shl(a, b)
    if op == ">>":
        return _shr(a, b)
    if op == "&":
        return wrap(a & b)
    if op == "|":
        return wrap(a | b)
    if op == "^":
        return wrap(a ^ b)
    cmp = {"==": a == b, "!=": a != b, "<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}
    return int(cmp[op])


_PY = {"+": "_w({} + {})", "-": "_w({} - {})", "*": "_w({} * {})", "/": "_div({}, {})",
       "%": "_mod({}, {})", "<<": "_shl({}, {})", ">>": "_shr({}, {})", "&": "_w({} & {})",
       "|": "_w({} | {})", "^": "_w({} ^ {})", "==": "int({} == {})", "!=": "int({} != {})",
       "<": "int({} < {})", "<=": "int({} <= {})", ">": "int({} > {})", ">=": "int({} >= {})"}
_ENV = {"_w": wrap, "_div": _div, "_mod": _mod, "_shl": _shl, "_shr": _shr}


def _py(e: Expr) -> str:
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        return f"r[{e.name!r}]"
    if isinstance(e, Neg):
        return f"_w(-{_py(e.operand)})"
    if isinstance(e, Call):
        return f"{e.fn}({_py(e.left)}, {_py(e.right)})"
    assert isinstance(e, BinOp)
    return _PY[e.op].format(_py(e.left), _py(e.right))


def compile_expr(e: Expr) -> Callable[[dict], int]:
    return eval(f"lambda r: {_py(e)}", dict(_ENV))


def eval_expr(e: Expr, regs: dict) -> int:
    return compile_expr(e)(regs)


# ---------------------------------------------------------------- thread state


@dataclass(eq=False)
class Lane:
    tid: int
    regs: dict
    pc: int = 0
    state: str = "run"  # run | barrier | bp | done
    bp_skip: int = -1


@dataclass(eq=False)
class Warp:
    cta: "Cta"
    wid: int  # warp index inside the CTA
    lanes: list[Lane]
    # fields below are owned by the timing simulator
    clock: int = 0
    pending: list = field(default_factory=list)
    order: int = 0


@dataclass(eq=False)
class Cta:
    ctaid: int
    warps: list[Warp]
    shared: dict[str, list[int]]

    def lanes(self):
        for w in self.warps:
            yield from w.lanes

    def all_done(self) -> bool:
        return all(l.state == "done" for l in self.lanes())


class MemoryPort(Protocol):
    def size(self, name: str) -> int: ...
    def load(self, warp: Warp, name: str, reqs: list[tuple[Lane, int]]) -> list[int]: ...
    def store(self, warp: Warp, name: str, reqs: list[tuple[Lane, int, int]], wt: bool) -> None: ...
    def atomic(self, warp: Warp, op: str, name: str, reqs: list[tuple[Lane, int, int]]) -> None: ...
    def clwb(self, warp: Warp, name: str, reqs: list[tuple[Lane, int]]) -> None: ...
    def persist_op(self, warp: Warp, op: str) -> None: ...


class Recorder:
    """Dynamic read/write event log over (array, index) locations."""

    def __init__(self):
        self.events: list[tuple[str, str, int]] = []  # (kind, array, index)

    def read(self, name: str, idx: int) -> None:
        if not is_aux(name):
            self.events.append(("r", name, idx))

    def write(self, name: str, idx: int) -> None:
        if not is_aux(name):
            self.events.append(("w", name, idx))


def atomic_apply(op: str, old: int, v: int) -> int:
    if op == "add":
        return wrap(old + v)
    if op == "min":
        return min(old, v)
    return max(old, v)


class FlatMemory:
    """Cache-free memory port over a MemoryImage (mutated in place)."""

    def __init__(self, image: MemoryImage):
        self.image = image

    def size(self, name: str) -> int:
        return len(self.image.arrays[name])

    def load(self, warp, name, reqs):
        arr = self.image.arrays[name]
        return [arr[i] for _, i in reqs]

    def store(self, warp, name, reqs, wt):
        arr = self.image.arrays[name]
        for _, i, v in reqs:
            arr[i] = v

    def atomic(self, warp, op, name, reqs):
        arr = self.image.arrays[name]
        for _, i, v in reqs:
            arr[i] = atomic_apply(op, arr[i], v)

    def clwb(self, warp, name, reqs):
        pass

    def persist_op(self, warp, op):
        pass


# ---------------------------------------------------------------- kernel executor


def device_size(d: DeviceDecl, grid: GridConfig) -> int:
    return eval_expr(d.size, {"griddim": grid.grid_dim, "ctadim": grid.cta_dim})


class KernelExec:
    """Executes one kernel launch; CTAs are created and stepped by the caller."""

    def __init__(self, kernel: KernelProgram, grid: GridConfig, binding: dict[str, str],
                 scalars: dict[str, int], port, *, recorder: Recorder | None = None,
                 loop_start: dict[int, int] | None = None,
                 breakpoints: dict[int, Callable[[Lane], bool]] | None = None,
                 code: FlatCode | None = None):
        self.kernel = kernel
        self.grid = grid
        self.port = port
        self.recorder = recorder
        self.loop_start = loop_start or {}
        self.breakpoints = breakpoints or {}
        self.code = code or lower(kernel)
        self.scalars = dict(scalars)
        self.shared_sizes = {d.name: d.size for d in kernel.shared}
        self.phys = dict(binding)
        self.handlers = [self._compile(op) for op in self.code.ops]

    # -- construction
    def make_cta(self, ctaid: int) -> Cta:
        cta = Cta(ctaid, [], {n: [0] * s for n, s in self.shared_sizes.items()})
        ws = self.grid.warp_size
        for w in range(self.grid.warps_per_cta):
            lanes = []
            for t in range(w * ws, (w + 1) * ws):
                regs = {"tid": t, "ctaid": ctaid, "ctadim": self.grid.cta_dim,
                        "griddim": self.grid.grid_dim}
                regs.update(self.scalars)
                lanes.append(Lane(t, regs))
            cta.warps.append(Warp(cta, w, lanes))
        return cta

    def loop_id(self, loop) -> int:
        return self.code.loop_id(loop)

    def op_index(self, kind: str, loop_id: int) -> int:
        for i, op in enumerate(self.code.ops):
            if op.kind == kind and op.loop == loop_id:
                return i
        raise KeyError((kind, loop_id))

    # -- stepping
    def step(self, warp: Warp) -> Op | None:
        """Execute one op for the lanes at the warp's minimum PC; None if stalled/done."""
        while True:
            lanes = [l for l in warp.lanes if l.state == "run"]
            if not lanes:
                return None
            pc = min(l.pc for l in lanes)
            active = [l for l in lanes if l.pc == pc]
            pred = self.breakpoints.get(pc)
            if pred is not None:
                keep = []
                for l in active:
                    if l.bp_skip != pc and pred(l):
                        l.state = "bp"
                    else:
                        keep.append(l)
                if not keep:
                    continue
                active = keep
            self.handlers[pc](warp, active)
            for l in active:
                l.bp_skip = -1
            return self.code.ops[pc]

    def check_barrier(self, cta: Cta) -> bool:
        """Release a completed barrier; True if lanes were released."""
        lanes = list(cta.lanes())
        if any(l.state in ("run", "bp") for l in lanes):
            return False
        waiting = [l for l in lanes if l.state == "barrier"]
        if not waiting:
            return False
        done = [l for l in lanes if l.state == "done"]
        if done:
            raise ExecFault("barrier divergence: some threads exited before syncthreads",
                            cta.ctaid, done[0].tid)
        pcs = {l.pc for l in waiting}
        if len(pcs) > 1:
            raise ExecFault("barrier divergence: threads wait at different syncthreads",
                            cta.ctaid, waiting[0].tid)
        for l in waiting:
            l.state = "run"
            l.pc += 1
        return True

    def paused(self, cta: Cta) -> bool:
        lanes = list(cta.lanes())
        return (any(l.state == "bp" for l in lanes)
                and all(l.state in ("bp", "done") for l in lanes))

    def release(self, cta: Cta) -> None:
        for l in cta.lanes():
            if l.state == "bp":
                l.state = "run"
                l.bp_skip = l.pc

    def run_cta(self, cta: Cta) -> str:
        """Round-robin the CTA's warps until it finishes ("done") or pauses ("paused")."""
        while True:
            progressed = False
            for w in cta.warps:
                if self.step(w) is not None:
                    progressed = True
            if progressed:
                continue
            if self.check_barrier(cta):
                continue
            if cta.all_done():
                return "done"
            if self.paused(cta):
                return "paused"
            if any(l.state == "bp" for l in cta.lanes()):
                # some lanes wait at a breakpoint, others at a barrier
                return "paused"
            raise ExecFault("deadlock: no runnable thread", cta.ctaid)

    # -- op compilation
    def _bounds(self, name: str, size: int, idx: int, warp: Warp, lane: Lane) -> None:
        if not 0 <= idx < size:
            raise ExecFault(f"out-of-bounds access {name}[{idx}] (size {size})",
                            warp.cta.ctaid, lane.tid)

    def _compile(self, op: Op):
        k = op.kind
        if k == "halt":
            def h(warp, lanes):
                for l in lanes:
                    l.state = "done"
            return h
        if k == "jump":
            target = op.target

            def h(warp, lanes):
                for l in lanes:
                    l.pc = target
            return h
        if k == "branch":
            cond, target = compile_expr(op.expr), op.target

            def h(warp, lanes):
                for l in lanes:
                    l.pc = l.pc + 1 if cond(l.regs) else target
            return h
        if k in ("loop_init", "loop_test", "loop_step"):
            return self._compile_loop(op)
        s = op.stmt
        if isinstance(s, Assign):
            f, dst = compile_expr(s.expr), s.dst

            def h(warp, lanes):
                for l in lanes:
                    l.regs[dst] = f(l.regs)
                    l.pc += 1
            return h
        if isinstance(s, Load):
            return self._compile_load(s)
        if isinstance(s, Store):
            return self._compile_store(s)
        if isinstance(s, Atomic):
            return self._compile_atomic(s)
        if isinstance(s, Clwb):
            fi, name = compile_expr(s.index), self.phys.get(s.array, s.array)

            def h(warp, lanes):
                size = self.port.size(name)
                reqs = []
                for l in lanes:
                    i = fi(l.regs)
                    self._bounds(name, size, i, warp, l)
                    reqs.append((l, i))
                self.port.clwb(warp, name, reqs)
                for l in lanes:
                    l.pc += 1
            return h
        if isinstance(s, Simple):
            if s.op == "syncthreads":
                def h(warp, lanes):
                    for l in lanes:
                        l.state = "barrier"
                return h
            opname = s.op

            def h(warp, lanes):
                self.port.persist_op(warp, opname)
                for l in lanes:
                    l.pc += 1
            return h
        raise TypeError(f"cannot execute {op!r}")

    def _compile_loop(self, op: Op):
        loop = op.stmt
        var, lid = loop.var, op.loop
        if op.kind == "loop_init":
            lo = compile_expr(loop.lo)

            def h(warp, lanes):
                for l in lanes:
                    start = self.loop_start.get(lid)
                    l.regs[var] = lo(l.regs) if start is None else start
                    l.pc += 1
            return h
        hi, step, target = compile_expr(loop.hi), compile_expr(loop.step), op.target
        if op.kind == "loop_test":
            def h(warp, lanes):
                for l in lanes:
                    s = step(l.regs)
                    if s == 0:
                        raise ExecFault("loop step is zero", warp.cta.ctaid, l.tid)
                    v, bound = l.regs[var], hi(l.regs)
                    finished = v >= bound if s > 0 else v <= bound
                    l.pc = target if finished else l.pc + 1
            return h

        def h(warp, lanes):
            for l in lanes:
                l.regs[var] = wrap(l.regs[var] + step(l.regs))
                l.pc = target
        return h

    def _compile_load(self, s: Load):
        fi, dst = compile_expr(s.index), s.dst
        if s.space == "shared":
            name, size = s.array, self.shared_sizes[s.array]
            rname = "shared." + name

            def h(warp, lanes):
                arr = warp.cta.shared[name]
                for l in lanes:
                    i = fi(l.regs)
                    self._bounds(name, size, i, warp, l)
                    if self.recorder:
                        self.recorder.read(rname, i)
                    l.regs[dst] = arr[i]
                    l.pc += 1
            return h
        name = self.phys.get(s.array, s.array)

        def h(warp, lanes):
            size = self.port.size(name)
            reqs = []
            for l in lanes:
                i = fi(l.regs)
                self._bounds(name, size, i, warp, l)
                reqs.append((l, i))
            vals = self.port.load(warp, name, reqs)
            for (l, i), v in zip(reqs, vals):
                if self.recorder:
                    self.recorder.read(name, i)
                l.regs[dst] = v
                l.pc += 1
        return h

    def _compile_store(self, s: Store):
        fi, fv = compile_expr(s.index), compile_expr(s.value)
        if s.space == "shared":
            name, size = s.array, self.shared_sizes[s.array]
            rname = "shared." + name

            def h(warp, lanes):
                arr = warp.cta.shared[name]
                for l in lanes:
                    i = fi(l.regs)
                    self._bounds(name, size, i, warp, l)
                    arr[i] = fv(l.regs)
                    if self.recorder:
                        self.recorder.write(rname, i)
                    l.pc += 1
            return h
        name, wt = self.phys.get(s.array, s.array), s.wt

        def h(warp, lanes):
            size = self.port.size(name)
            reqs = []
            for l in lanes:
                i = fi(l.regs)
                self._bounds(name, size, i, warp, l)
                reqs.append((l, i, fv(l.regs)))
            self.port.store(warp, name, reqs, wt)
            for l, i, _ in reqs:
                if self.recorder:
                    self.recorder.write(name, i)
                l.pc += 1
        return h

    def _compile_atomic(self, s: Atomic):
        fi, fv = compile_expr(s.index), compile_expr(s.value)
        name, aop = self.phys.get(s.array, s.array), s.op

        def h(warp, lanes):
            size = self.port.size(name)
            reqs = []
            for l in lanes:
                i = fi(l.regs)
                self._bounds(name, size, i, warp, l)
                reqs.append((l, i, fv(l.regs)))
            self.port.atomic(warp, aop, name, reqs)
            for l, i, _ in reqs:
                if self.recorder:
                    self.recorder.read(name, i)
                    self.recorder.write(name, i)
                l.pc += 1
        return h


# ---------------------------------------------------------------- host level


@dataclass(frozen=True)
class LaunchContext:
    """A kernel launch resolved against its host script."""

    index: int  # position among the script's launches
    kernel: KernelProgram
    grid: GridConfig
    binding: dict
    scalars: dict
    launch: Launch

    def executor(self, port, **kw) -> KernelExec:
        return KernelExec(self.kernel, self.grid, self.binding, self.scalars, port, **kw)


def launch_contexts(program: Program, grid: GridConfig) -> list[LaunchContext]:
    out = []
    for n, step in enumerate(program.host.launches()):
        k = program.kernel(step.kernel)
        g = GridConfig(step.grid[0], step.grid[1], grid.warp_size) if step.grid else grid
        binding, scalars = {}, {}
        for p, a in zip(k.params, step.args):
            if p.space == "global":
                binding[p.name] = a
            else:
                scalars[p.name] = a
        out.append(LaunchContext(n, k, g, binding, scalars, step))
    return out


def prepare_image(program: Program, grid: GridConfig, image: MemoryImage) -> MemoryImage:
    """Copy of ``image`` with every device and host-allocated array present."""
    img = image.copy()
    for d in program.devices:
        if d.name not in img.arrays:
            img.arrays[d.name] = [d.fill] * device_size(d, grid)
    for name, size in program.host_arrays().items():
        if name not in img.arrays:
            img.arrays[name] = [0] * size
        elif len(img.arrays[name]) != size:
            raise ValueError(f"input array {name!r} has {len(img.arrays[name])} elements, "
                             f"host allocates {size}")
    return img


def run_launch(ctx: LaunchContext, image: MemoryImage, *, ctas=None,
               recorder: Recorder | None = None, port=None, **kw) -> MemoryImage:
    """Run (some CTAs of) one launch on the flat memory, mutating ``image``."""
    ex = ctx.executor(port or FlatMemory(image), recorder=recorder, **kw)
    for c in (range(ctx.grid.grid_dim) if ctas is None else ctas):
        cta = ex.make_cta(c)
        if ex.run_cta(cta) != "done":
            raise ExecFault("kernel paused at a breakpoint with no handler", c)
    return image


def apply_host_step(step, image: MemoryImage) -> None:
    """Functional effect of a non-launch host step on a memory image."""
    from gpupm.lang.ir import MemcpyD2D, SetFlag

    if isinstance(step, MemcpyD2D):
        src, dst = image.arrays[step.src], image.arrays[step.dst]
        if step.start < 0 or step.start + step.count > min(len(src), len(dst)):
            raise ExecFault(f"memcpy {step.src}->{step.dst} out of bounds")
        dst[step.start:step.start + step.count] = src[step.start:step.start + step.count]
    elif isinstance(step, SetFlag):
        image.flags[step.flag] = step.value


def run_reference(program: Program, grid: GridConfig, image: MemoryImage) -> MemoryImage:
    """Failure-free functional execution of the whole host script."""
    img = prepare_image(program, grid, image)
    ctxs = iter(launch_contexts(program, grid))
    for step in program.host.steps:
        if isinstance(step, Launch):
            run_launch(next(ctxs), img)
        else:
            apply_host_step(step, img)
    return img
