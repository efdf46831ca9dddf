"""Crash recovery: read the persistent flags, undo what the logs cover, re-execute the rest.

Recovery is functional and runs on the flat reference interpreter. ``recover``
only restores data from logs (and from host-side input copies for kernel-level
transactions) and decides what must run again; ``resume`` runs it. Launches
are walked in host-script order: finished launches are skipped, the first
unfinished one is recovered at its transaction scope, and every later host
step is replayed from the original program.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from gpupm.lang.ir import Flag, For, Launch
from gpupm.passes.compile import Compiled
from gpupm.passes.tx import LaunchTx, ranges_of
from gpupm.refexec.image import MemoryImage
from gpupm.refexec.interp import (
    ExecFault, FlatMemory, LaunchContext, apply_host_step, eval_expr, launch_contexts,
)


class RecoveryError(Exception):
    """The persistent state is inconsistent with the protocol (e.g. a corrupt flag)."""


class RecoveryInterrupted(Exception):
    """Raised by ``resume`` when a store budget models a crash during recovery."""


@dataclass(frozen=True)
class RecoveryPolicy:
    """How one transactional launch is recovered."""

    scope: str  # kernel | cta | loop
    uses_undo_log: bool
    idempotent_reexec: bool
    log_layout: tuple[tuple[str, str], ...]  # (log array, data array)
    flag_region: str

    def __post_init__(self):
        if self.uses_undo_log == self.idempotent_reexec:
            raise ValueError("a transactional scope either restores from a log or re-executes")

    @classmethod
    def of(cls, lt: LaunchTx) -> "RecoveryPolicy":
        undo = not lt.idempotent
        layout = tuple(sorted(lt.log_map.items()))
        return cls(lt.scope, undo, not undo, layout, lt.flag)


@dataclass(frozen=True)
class Action:
    """One recovery step: ``restored_range`` or ``reexecuted_{kernel,cta,iteration}``."""

    kind: str
    launch: int
    cta: int = -1
    array: str = ""
    start: int = 0
    count: int = 0
    iteration: int | None = None

    def describe(self) -> str:
        if self.kind == "restored_range":
            where = f" cta {self.cta}" if self.cta >= 0 else ""
            return (f"launch {self.launch}{where}: restored {self.array}"
                    f"[{self.start}:{self.start + self.count}]")
        if self.kind == "reexecuted_kernel":
            return f"launch {self.launch}: re-executed kernel"
        if self.kind == "reexecuted_cta":
            return f"launch {self.launch} cta {self.cta}: re-executed"
        return f"launch {self.launch} cta {self.cta}: resumed at iteration {self.iteration}"


@dataclass
class Marks:
    """What ``resume`` runs for the first unfinished launch."""

    launch: int
    ctas: list[int]  # CTAs to run (all of them for kernel scope)
    loop_start: dict[int, int] = field(default_factory=dict)  # cta -> resume iteration
    shared: dict[int, dict[str, list[int]]] = field(default_factory=dict)  # cta -> shared init


@dataclass
class Recovered:
    image: MemoryImage
    marks: Marks | None  # None when every launch had finished
    actions: list[Action] = field(default_factory=list)


# ------------------------------------------------------------------ recover

def _flag(v: int, where: str) -> Flag:
    try:
        return Flag(v)
    except ValueError:
        raise RecoveryError(f"{where}: corrupt flag value {v}") from None


def _cta_flags(img: MemoryImage, lt: LaunchTx, ctas: int) -> list[Flag]:
    arr = img.arrays.get(lt.flag)
    if arr is None:
        raise RecoveryError(f"flag region {lt.flag!r} missing from the persistent image")
    return [_flag(arr[c], f"{lt.flag}[{c}]") for c in range(ctas)]


def launch_finished(img: MemoryImage, lt: LaunchTx, ctas: int) -> bool:
    if lt.scope == "kernel":
        return img.flags.get(lt.flag, Flag.INITIAL) is Flag.COMPLETE
    if lt.scope == "loop":
        return img.flags.get(lt.done, Flag.INITIAL) is Flag.COMPLETE
    return all(f is Flag.COMPLETE for f in _cta_flags(img, lt, ctas))


def _restore(img: MemoryImage, log: str, data: str, start: int, count: int) -> None:
    img.arrays[data][start:start + count] = img.arrays[log][start:start + count]


def _loop_stmt(ctx: LaunchContext, var: str) -> For:
    for s in ctx.kernel.body:
        if isinstance(s, For) and s.var == var:
            return s
    raise RecoveryError(f"kernel {ctx.kernel.name!r} has no top-level loop over {var!r}")


def _lane_regs(ctx: LaunchContext, cta: int) -> dict:
    regs = {"tid": 0, "ctaid": cta, "ctadim": ctx.grid.cta_dim, "griddim": ctx.grid.grid_dim}
    regs.update(ctx.scalars)
    return regs


def recover(persistent: MemoryImage, compiled: Compiled,
            inputs: MemoryImage | None = None) -> Recovered:
    """Restore logged state for the first unfinished launch and mark what must re-run.

    ``inputs`` is the host-side input copy; kernel-level transactions without
    unified memory restore host-backed arrays from it.
    """
    img = persistent.copy()
    ctxs = launch_contexts(compiled.program, compiled.grid)
    for lt, ctx in zip(compiled.launches, ctxs):
        ctas = ctx.grid.grid_dim
        if launch_finished(img, lt, ctas):
            continue
        actions: list[Action] = []
        if lt.scope == "kernel":
            marks = _recover_kernel(img, lt, ctx, inputs, actions)
        elif lt.scope == "cta":
            marks = _recover_cta(img, lt, ctx, actions)
        else:
            marks = _recover_loop(img, lt, ctx, actions)
        return Recovered(img, marks, actions)
    return Recovered(img, None, [])


def _recover_kernel(img, lt: LaunchTx, ctx, inputs, actions) -> Marks:
    marks = Marks(lt.index, list(range(ctx.grid.grid_dim)))
    if img.flags.get(lt.flag, Flag.INITIAL) is not Flag.IN_TX:
        return marks
    if not lt.idempotent:
        for log, data, start, count in lt.log_ranges:
            _restore(img, log, data, start, count)
            actions.append(Action("restored_range", lt.index, -1, data, start, count))
        for arr in sorted(lt.host_backed):
            if inputs is None or arr not in inputs.arrays:
                raise RecoveryError(f"host input copy of {arr!r} is needed to recover")
            img.arrays[arr] = list(inputs.arrays[arr])
            actions.append(Action("restored_range", lt.index, -1, arr, 0, len(img.arrays[arr])))
    actions.append(Action("reexecuted_kernel", lt.index))
    return marks


def _recover_cta(img, lt: LaunchTx, ctx, actions) -> Marks:
    flags = _cta_flags(img, lt, ctx.grid.grid_dim)
    log_of = {data: log for log, data in lt.log_map.items()}
    run = []
    for c, f in enumerate(flags):
        if f is Flag.COMPLETE:
            continue
        run.append(c)
        if f is not Flag.IN_TX:
            continue
        if not lt.idempotent:
            for data, start, count in ranges_of(lt.logged.get(c, ())):
                _restore(img, log_of[data], data, start, count)
                actions.append(Action("restored_range", lt.index, c, data, start, count))
        actions.append(Action("reexecuted_cta", lt.index, c))
    return Marks(lt.index, run)


def _recover_loop(img, lt: LaunchTx, ctx, actions) -> Marks:
    info = lt.loop
    loop = _loop_stmt(ctx, info.var)
    flags = _cta_flags(img, lt, ctx.grid.grid_dim)
    marks = Marks(lt.index, [])
    for c, f in enumerate(flags):
        marks.ctas.append(c)
        if f is Flag.INITIAL:
            continue  # nothing of the loop ran durably; start the CTA afresh
        shared: dict[str, list[int]] = {}
        for sh, (shadow, n) in sorted(info.shadows.items()):
            lo = c * n
            if f is Flag.IN_TX:
                _restore(img, info.logs[sh], shadow, lo, n)
                actions.append(Action("restored_range", lt.index, c, shadow, lo, n))
            shared[sh] = list(img.arrays[shadow][lo:lo + n])
        if f is Flag.IN_TX:
            start = img.arrays[info.last_log_iter][c]
        else:
            start = img.arrays[info.last_iter][c] + eval_expr(loop.step, _lane_regs(ctx, c))
        marks.loop_start[c] = start
        marks.shared[c] = shared
        actions.append(Action("reexecuted_iteration", lt.index, c, iteration=start))
    return marks


# ------------------------------------------------------------------ resume

class _BudgetMemory(FlatMemory):
    """Flat memory that stops after a number of stores, modeling a crash mid-recovery."""

    def __init__(self, image: MemoryImage, budget: int | None):
        super().__init__(image)
        self.budget = budget

    def _spend(self) -> None:
        if self.budget is not None:
            if self.budget <= 0:
                raise RecoveryInterrupted("store budget exhausted")
            self.budget -= 1

    def store(self, warp, name, reqs, wt):
        self._spend()
        super().store(warp, name, reqs, wt)

    def atomic(self, warp, op, name, reqs):
        self._spend()
        super().atomic(warp, op, name, reqs)


def _run_marked(ctx: LaunchContext, lt: LaunchTx | None, marks: Marks, port) -> None:
    loop_pc = None
    ex = ctx.executor(port)
    if lt is not None and lt.scope == "loop":
        lid = ex.loop_id(_loop_stmt(ctx, lt.loop.var))
        loop_pc = ex.op_index("loop_init", lid)
    for c in marks.ctas:
        resumed = c in marks.loop_start and loop_pc is not None
        if resumed:
            ex = ctx.executor(port, loop_start={lid: marks.loop_start[c]},
                              breakpoints={loop_pc: lambda lane: True})
        else:
            ex = ctx.executor(port)
        cta = ex.make_cta(c)
        state = ex.run_cta(cta)
        if resumed and state == "paused":
            # the prologue ran again; put the checkpointed shared state back
            for sh, vals in marks.shared[c].items():
                cta.shared[sh][:] = vals
                shadow, n = lt.loop.shadows[sh]
                port.image.arrays[shadow][c * n:(c + 1) * n] = vals
            ex.release(cta)
            state = ex.run_cta(cta)
        if state != "done":
            raise ExecFault("resumed CTA did not finish", c)


def resume(rec: Recovered, compiled: Compiled, *, budget: int | None = None) -> MemoryImage:
    """Run the marked units, then the rest of the original host script.

    The marked launch runs the instrumented kernel (a real system relaunches
    the same code, which keeps flags and logs truthful); later launches run
    the original program. ``budget`` caps the number of stores, raising
    ``RecoveryInterrupted`` with the image left as a crash would leave it.
    """
    img = rec.image
    if rec.marks is None:
        return img
    port = _BudgetMemory(img, budget)
    n = rec.marks.launch
    inst = launch_contexts(compiled.program, compiled.grid)[n]
    orig = launch_contexts(compiled.original, compiled.grid)
    steps = compiled.original.host.steps
    launch_pos = [i for i, s in enumerate(steps) if isinstance(s, Launch)]
    first = launch_pos[n - 1] + 1 if n else 0
    for s in steps[first:launch_pos[n]]:
        apply_host_step(s, img)  # host data movement is re-executable
    lt = compiled.launches[n] if n < len(compiled.launches) else None
    _run_marked(inst, lt, rec.marks, port)
    later = iter(orig[n + 1:])
    for s in steps[launch_pos[n] + 1:]:
        if isinstance(s, Launch):
            ctx = next(later)
            _run_marked(ctx, None, Marks(ctx.index, list(range(ctx.grid.grid_dim))), port)
        else:
            apply_host_step(s, img)
    return img


def recover_and_resume(persistent: MemoryImage, compiled: Compiled,
                       inputs: MemoryImage | None = None) -> tuple[MemoryImage, list[Action]]:
    rec = recover(persistent, compiled, inputs)
    return resume(rec, compiled), rec.actions

