"""Epoch-scope regions and the dynamic idempotency oracle.

A region is one kernel launch, one CTA of a launch, or one iteration of a
top-level loop inside one CTA. Shared memory counts as region state for loop
iterations, since it stays live across them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from gpupm.lang.ir import Atomic, For, GridConfig, Program, walk
from gpupm.refexec.image import MemoryImage
from gpupm.refexec.interp import (
    Cta, ExecFault, FlatMemory, LaunchContext, Recorder, launch_contexts, prepare_image,
    run_launch,
)


@dataclass(frozen=True)
class Region:
    kind: str  # kernel | cta | loop
    ctx: LaunchContext
    ctaid: int | None = None
    loop: For | None = None
    iteration: int | None = None

    def has_atomics(self) -> bool:
        stmts = self.loop.body if self.kind == "loop" else tuple(self.ctx.kernel.all_stmts())
        return any(isinstance(s, Atomic) for s in walk(stmts))

    def describe(self) -> str:
        k = self.ctx.kernel.name
        if self.kind == "kernel":
            return f"kernel {k}"
        if self.kind == "cta":
            return f"{k} cta {self.ctaid}"
        return f"{k} cta {self.ctaid} iteration {self.iteration}"


def launch_context(program: Program, grid: GridConfig, launch: int = 0) -> LaunchContext:
    return launch_contexts(program, grid)[launch]


def kernel_region(program: Program, grid: GridConfig, launch: int = 0) -> Region:
    return Region("kernel", launch_context(program, grid, launch))


def cta_region(program: Program, grid: GridConfig, ctaid: int, launch: int = 0) -> Region:
    return Region("cta", launch_context(program, grid, launch), ctaid)


def annotated_loop(kernel) -> For | None:
    """The top-level loop carrying an ``epoch loop`` pragma, else the first top-level loop."""
    loops = [s for s in kernel.body if isinstance(s, For)]
    for s in loops:
        if s.directive is not None:
            return s
    return loops[0] if loops else None


def loop_region(program: Program, grid: GridConfig, ctaid: int, iteration: int,
                launch: int = 0, loop: For | None = None) -> Region:
    ctx = launch_context(program, grid, launch)
    loop = loop or annotated_loop(ctx.kernel)
    if loop is None or not any(s is loop for s in ctx.kernel.body):
        raise ValueError("loop regions need a top-level loop")
    return Region("loop", ctx, ctaid, loop, iteration)


def state_before(program: Program, grid: GridConfig, image: MemoryImage,
                 launch: int = 0) -> MemoryImage:
    """Image right before the given launch of a failure-free run."""
    from gpupm.lang.ir import Launch
    from gpupm.refexec.interp import apply_host_step

    img = prepare_image(program, grid, image)
    ctxs = iter(launch_contexts(program, grid))
    n = 0
    for step in program.host.steps:
        if isinstance(step, Launch):
            if n == launch:
                return img
            run_launch(next(ctxs), img)
            n += 1
        else:
            apply_host_step(step, img)
    raise IndexError(f"program has no launch #{launch}")


@dataclass
class _Result:
    image: MemoryImage
    shared: dict = field(default_factory=dict)


def _snapshot_lanes(cta: Cta):
    return [(l, dict(l.regs), l.pc, l.state) for l in cta.lanes()]


def _restore_lanes(snap) -> None:
    for l, regs, pc, state in snap:
        l.regs, l.pc, l.state, l.bp_skip = dict(regs), pc, state, pc


def _run_loop_iteration(region: Region, image: MemoryImage, times: int,
                        recorder: Recorder | None) -> _Result:
    ctx, loop, it = region.ctx, region.loop, region.iteration
    var = loop.var
    phase = {"v": "start"}

    def pred(lane) -> bool:
        v = lane.regs[var]
        return v == it if phase["v"] == "start" else v != it

    img = image.copy()
    probe = ctx.executor(FlatMemory(img))
    test_pc = probe.op_index("loop_test", probe.loop_id(loop))
    ex = ctx.executor(FlatMemory(img), breakpoints={test_pc: pred}, code=probe.code)
    cta = ex.make_cta(region.ctaid)
    status = ex.run_cta(cta)
    if status == "done":
        return _Result(img, {k: list(v) for k, v in cta.shared.items()})
    snap = _snapshot_lanes(cta)
    ex.recorder = recorder
    for n in range(times):
        if n:
            _restore_lanes(snap)
        phase["v"] = "run"
        ex.release(cta)
        ex.run_cta(cta)
        for l in cta.lanes():
            if l.state == "bp":
                l.state = "run"  # mark as reached the region end
    ex.recorder = None
    return _Result(img, {k: list(v) for k, v in cta.shared.items()})


def run_region(region: Region, state: MemoryImage, times: int = 1,
               recorder: Recorder | None = None) -> _Result:
    """Execute the region ``times`` times back to back from ``state``."""
    if region.kind == "loop":
        return _run_loop_iteration(region, state, times, recorder)
    img = state.copy()
    ctas = None if region.kind == "kernel" else [region.ctaid]
    for _ in range(times):
        run_launch(region.ctx, img, ctas=ctas, recorder=recorder)
    return _Result(img)


def run_region_twice(region: Region, state: MemoryImage) -> bool:
    """Dynamic idempotency oracle: does a second execution leave the result unchanged?"""
    if region.has_atomics():
        return False
    try:
        once = run_region(region, state, 1)
        twice = run_region(region, state, 2)
    except ExecFault:
        return False
    return once.image.same_data(twice.image) and once.shared == twice.shared


@dataclass
class RWRecord:
    read_set: set = field(default_factory=set)
    write_set: set = field(default_factory=set)
    overwritten_live_in: set = field(default_factory=set)
    events: list = field(default_factory=list)


def record_rw_sets(region: Region, state: MemoryImage) -> RWRecord:
    """Exact dynamic read/write sets of one region execution."""
    rec = Recorder()
    run_region(region, state, 1, rec)
    out = RWRecord(events=list(rec.events))
    first: dict = {}
    for kind, name, idx in rec.events:
        loc = (name, idx)
        first.setdefault(loc, kind)
        (out.read_set if kind == "r" else out.write_set).add(loc)
    out.overwritten_live_in = {loc for loc in out.write_set if first[loc] == "r"}
    return out
