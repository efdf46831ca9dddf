"""Whole-program instrumentation under one persistency directive."""

from __future__ import annotations

from dataclasses import dataclass, field

from gpupm.lang.ir import (
    Atomic, Const, Flag, GridConfig, HostOp, HostScript, Launch, MemcpyD2D, Model,
    PersistencyDirective, Program, Scope, SetFlag, Store, Var,
)
from gpupm.passes.common import (
    PassError, device, done_flag, flag_array, host_flag, log_array,
)
from gpupm.passes.epoch import transform_epoch_cta, transform_epoch_kernel, transform_epoch_loop
from gpupm.passes.idempotency import IdempotencyResult, analyze_idempotency, enumerate_accesses
from gpupm.passes.strict import transform_strict
from gpupm.passes.tx import (
    MUTATIONS, LaunchTx, Promote, _logged_stores, kernel_tx_steps, ranges_of, transform_tx_cta,
    transform_tx_loop,
)
from gpupm.refexec.interp import LaunchContext, device_size, launch_contexts


@dataclass
class Compiled:
    """An instrumented program plus the facts recovery and reporting need."""

    original: Program
    program: Program
    directive: PersistencyDirective | None
    grid: GridConfig
    launches: list[LaunchTx] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    idempotency: dict = field(default_factory=dict)  # launch index -> IdempotencyResult
    options: dict = field(default_factory=dict)  # compile keyword options, for replay

    @property
    def transactional(self) -> bool:
        return bool(self.launches)


def _array_sizes(program: Program, grid: GridConfig) -> dict[str, int]:
    sizes = dict(program.host_arrays())
    for d in program.devices:
        sizes[d.name] = device_size(d, grid)
    return sizes


def _host_backed(program: Program, upto: int) -> set[str]:
    """Host-allocated arrays whose device copy still equals the host input before launch ``upto``."""
    arrays = set(program.host_arrays())
    n = 0
    ctxs_written: set[str] = set()
    for step in program.host.steps:
        if isinstance(step, Launch):
            if n == upto:
                break
            k = program.kernel(step.kernel)
            bind = {p.name: a for p, a in zip(k.params, step.args) if p.space == "global"}
            for s in k.all_stmts():
                if isinstance(s, (Store, Atomic)) and getattr(s, "space", "global") == "global":
                    ctxs_written.add(bind.get(s.array, s.array))
            n += 1
        elif isinstance(step, MemcpyD2D):
            ctxs_written.add(step.dst)
    return arrays - ctxs_written


def compile_program(program: Program, d: PersistencyDirective | None, grid: GridConfig, *,
                    unified: bool = False, mutate: str | None = None,
                    force_log: bool = False) -> Compiled:
    """Instrument every launched kernel of ``program`` under directive ``d``.

    ``None`` leaves the program untouched (the baseline). Durable transactions
    over kernels with atomics, or kernels the requested scope cannot protect,
    are promoted to kernel scope with a diagnostic. ``unified`` models unified
    memory, where kernel-level logs must also cover host-visible inputs.
    ``force_log`` keeps the full log even when the scope is idempotent.
    """
    if mutate is not None and mutate not in MUTATIONS:
        raise PassError(f"unknown mutation {mutate!r}")
    out = Compiled(program, program, d, grid,
                   options={"unified": unified, "mutate": mutate, "force_log": force_log})
    if d is None:
        return out
    ctxs = launch_contexts(program, grid)
    counts: dict[str, int] = {}
    for c in ctxs:
        counts[c.kernel.name] = counts.get(c.kernel.name, 0) + 1
    kernels = {k.name: k for k in program.kernels}
    devices: list = []
    host = program.host

    if d.model is Model.STRICT:
        for name in counts:
            kernels[name] = transform_strict(kernels[name], d)
    elif not d.tx:
        if d.scope is Scope.KERNEL:
            host = transform_epoch_kernel(host, d)
        elif d.scope is Scope.CTA:
            for name in counts:
                kernels[name] = transform_epoch_cta(kernels[name], d)
        else:
            for name in counts:
                kernels[name], decls = transform_epoch_loop(kernels[name], None, d)
                devices += decls
    else:
        host, devices = _compile_tx(program, d, grid, ctxs, counts, kernels, out,
                                    unified=unified, mutate=mutate, force_log=force_log)
    prog = Program(program.devices, tuple(kernels[k.name] for k in program.kernels), host)
    out.program = prog.with_devices(devices)
    return out


def _compile_tx(program, d, grid, ctxs: list[LaunchContext], counts, kernels, out: Compiled, *,
                unified, mutate, force_log):
    sizes = _array_sizes(program, grid)
    devices: list = []
    scope_of: dict[int, str] = {}
    for c in ctxs:
        want = d.scope.value
        if want != "kernel" and counts[c.kernel.name] > 1:
            raise PassError(f"kernel {c.kernel.name!r} is launched more than once; "
                            f"{want}-level transactions need one flag region per launch")
        idem = analyze_idempotency(want, ctx=c)
        out.idempotency[c.index] = idem
        use_idem = d.idem and not force_log
        lt: LaunchTx | None = None
        if want != "kernel":
            try:
                lt = _tx_device(c, d, idem, use_idem, sizes, kernels, devices, mutate)
            except Promote as why:
                out.diagnostics.append(
                    f"{c.kernel.name}: {want}-level transaction promoted to kernel level ({why})")
        if lt is None:
            kidem = analyze_idempotency("kernel", ctx=c)
            out.idempotency[c.index] = kidem
            lt = _tx_kernel(program, c, d, kidem, use_idem, sizes, devices, unified)
        scope_of[c.index] = lt.scope
        out.launches.append(lt)

    # host script
    steps: list = []
    n = 0
    for step in program.host.steps:
        if not isinstance(step, Launch):
            steps.append(step)
            continue
        lt = out.launches[n]
        if lt.scope == "kernel":
            steps += kernel_tx_steps(step, n, lt.log_ranges, d, lt.idempotent, mutate)
        else:
            steps += [step, _sync()]
            if lt.scope == "loop":
                steps.append(SetFlag(lt.done, Flag.COMPLETE))
        n += 1
    return HostScript(tuple(steps)), devices


def _sync():
    return HostOp("sync")


def _tx_device(c: LaunchContext, d, idem: IdempotencyResult, use_idem, sizes, kernels,
               devices, mutate) -> LaunchTx:
    k = c.kernel
    name = k.name
    if k.has_atomics():
        raise Promote("the kernel uses global atomics")
    if d.scope is Scope.LOOP:
        cta_idem = analyze_idempotency("cta", ctx=c)
        if not cta_idem.idempotent:
            raise Promote(f"global stores outside the shadowed shared state are not "
                          f"re-executable ({cta_idem.reason})")
        new, decls, info = transform_tx_loop(k, d, mutate)
        kernels[name] = new
        devices.extend(decls)
        devices.append(device(flag_array(name), _griddim()))
        return LaunchTx(c.index, name, "loop", False, flag_array(name), loop=info,
                        done=done_flag(name, c.index),
                        log_map={log: f"shadow:{sh}" for sh, log in info.logs.items()})
    # CTA scope
    if idem.opaque_writes or idem.whole_arrays:
        raise Promote("store addresses are not statically known")
    idempotent = use_idem and idem.idempotent
    if idempotent:
        stores = None
    elif use_idem:
        acc = enumerate_accesses(c)
        stores = _logged_stores(k, acc, True, idem.must_log)
    else:
        stores = _logged_stores(k, None, False)
    new = transform_tx_cta(k, d, stores, mutate)
    kernels[name] = new
    devices.append(device(flag_array(name), _griddim()))
    log_map: dict = {}
    logged: dict = {}
    if stores is not None:
        for s in stores:
            log = log_array(name, s.array)
            phys = c.binding.get(s.array, s.array)
            log_map[log] = phys
            if log not in {dd.name for dd in devices}:
                devices.append(device(log, Const(sizes[phys])))
        inst = LaunchContext(c.index, new, c.grid, c.binding, c.scalars, c.launch)
        for a in enumerate_accesses(inst):
            if a.kind == "w" and a.array in log_map:
                if a.index is None:
                    raise Promote("undo-log index is not statically known")
                logged.setdefault(a.ctaid, set()).add((log_map[a.array], a.index))
    return LaunchTx(c.index, name, "cta", idempotent, flag_array(name), log_map, logged)


def _griddim():
    return Var("griddim")


def _tx_kernel(program, c: LaunchContext, d, idem: IdempotencyResult, use_idem, sizes,
               devices, unified) -> LaunchTx:
    written: set[str] = set()
    for s in c.kernel.all_stmts():
        if isinstance(s, (Store, Atomic)) and getattr(s, "space", "global") == "global":
            written.add(c.binding.get(s.array, s.array))
    idempotent = use_idem and idem.idempotent
    if idempotent:
        locs: set = set()
    elif use_idem:
        locs = set(idem.must_log)
        for arr in idem.whole_arrays:
            if not arr.startswith("shared."):
                locs |= {(arr, i) for i in range(sizes[arr])}
    else:
        locs = {(arr, i) for arr in written for i in range(sizes[arr])}
    backed = set() if unified else _host_backed(program, c.index) & written
    ranges = []
    tag = f"k{c.index}"
    for arr, start, count in ranges_of(l for l in locs if l[0] not in backed):
        log = log_array(tag, arr)
        if log not in {dd.name for dd in devices}:
            devices.append(device(log, Const(sizes[arr])))
        ranges.append((log, arr, start, count))
    restore_from_input = {a for a in backed if any(l[0] == a for l in locs)}
    return LaunchTx(c.index, c.kernel.name, "kernel", idempotent,
                    host_flag(c.kernel.name, c.index), {r[0]: r[1] for r in ranges},
                    log_ranges=ranges, host_backed=restore_from_input)
