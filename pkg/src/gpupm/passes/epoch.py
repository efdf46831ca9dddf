"""Epoch persistency at kernel, CTA and loop scope."""

from __future__ import annotations

from dataclasses import replace

from gpupm.lang.affine import walk_defs
from gpupm.lang.cfg import ensure_postdominant_exit
from gpupm.lang.ir import (
    Atomic, BinOp, Const, DeviceDecl, For, HostOp, HostScript, KernelProgram, Launch, Mech,
    Model, PersistencyDirective, Scope, Simple, Store, Var, walk,
)
from gpupm.lang.slicing import SliceUnavailable, slice_address
from gpupm.refexec.image import is_aux
from gpupm.passes.common import (
    PassError, append_at_exit, clwb_of, device, is_global_store, per_cta, persist_fence,
    rewrite, rewrite_kernel, shadow_array, tid0,
)


def _check(d: PersistencyDirective, scope: Scope) -> None:
    if d.model is not Model.EPOCH or d.scope is not scope:
        raise PassError(f"expected an epoch {scope.value} directive, got {d.label}")


def l2wb_barrier(durable_wpq: bool) -> tuple:
    """All threads drain their own stores, then one thread writes back the whole L2."""
    return (Simple("sfence"), Simple("syncthreads"),
            tid0((Simple("l2wb"),) + persist_fence(durable_wpq)))


# ------------------------------------------------------------------ CTA scope

def exit_persist_code(kernel: KernelProgram, d: PersistencyDirective) -> tuple:
    """Exit sequence: one sliced clwb per distinct store address, then one persist fence."""
    dw = walk_defs(kernel)
    code: list = []
    seen: set = set()
    for s in kernel.global_stores():
        if is_aux(s.array):
            continue
        try:
            sl = slice_address(s, kernel, dw)
        except SliceUnavailable as err:
            raise PassError(f"cannot regenerate the address of '{s.opcode} {s.array}[...]' "
                            f"at the kernel exit ({err}); use the wt or l2wb option") from err
        emitted = sl.emit()
        if emitted not in seen:
            seen.add(emitted)
            code.extend(emitted)
    return tuple(code) + persist_fence(d.durable_wpq)


def transform_epoch_cta(kernel: KernelProgram, d: PersistencyDirective) -> KernelProgram:
    _check(d, Scope.CTA)
    if d.mech is Mech.CLWB:
        k, _ = ensure_postdominant_exit(kernel)
        return append_at_exit(k, exit_persist_code(k, d))
    if d.mech is Mech.WT:
        k = rewrite_kernel(kernel, _wt_rewrite)
        fence = persist_fence(d.durable_wpq) if kernel.has_atomics() else (Simple("sfence"),)
        k, _ = ensure_postdominant_exit(k)
        return append_at_exit(k, fence)
    k, _ = ensure_postdominant_exit(kernel)
    return append_at_exit(k, (Simple("syncthreads"),
                              tid0((Simple("l2wb"),) + persist_fence(d.durable_wpq))))


def _wt_rewrite(s):
    if is_global_store(s):
        return (replace(s, wt=True),)
    if isinstance(s, Atomic):
        return (s, clwb_of(s))
    return None


def _clwb_rewrite(s):
    if is_global_store(s) or isinstance(s, Atomic):
        return (s, clwb_of(s))
    return None


# ------------------------------------------------------------------ kernel scope

def transform_epoch_kernel(host: HostScript, d: PersistencyDirective | None = None,
                           only_anchored: bool = False) -> HostScript:
    """``launch; sync; l2wb; [pcommit;] sync`` after every (anchored) launch."""
    steps = list(host.steps)
    out: list = []
    i = 0
    while i < len(steps):
        s = steps[i]
        out.append(s)
        i += 1
        if not isinstance(s, Launch):
            continue
        dd = s.directive if only_anchored else (d or s.directive)
        if dd is None or dd.model is not Model.EPOCH or dd.scope is not Scope.KERNEL:
            continue
        out += [HostOp("sync"), HostOp("l2wb")]
        if not dd.durable_wpq:
            out.append(HostOp("pcommit"))
        out.append(HostOp("sync"))
        if i < len(steps) and isinstance(steps[i], HostOp) and steps[i].op == "sync":
            i += 1
    return HostScript(tuple(out))


# ------------------------------------------------------------------ loop scope

def find_loop(kernel: KernelProgram, loop: For | int | None = None) -> For:
    """The loop to instrument: given object, pre-order loop id, or the annotated one."""
    loops = kernel.loops()
    if isinstance(loop, For):
        return loop
    if isinstance(loop, int):
        return loops[loop]
    for s in kernel.body:
        if isinstance(s, For) and s.directive is not None:
            return s
    for s in loops:
        if s.directive is not None:
            return s
    top = [s for s in kernel.body if isinstance(s, For)]
    if not top:
        raise PassError(f"kernel {kernel.name!r} has no loop for a loop-level epoch")
    return top[0]


def shadow_decls(kernel: KernelProgram, loop: For) -> dict[str, tuple[str, int]]:
    """Shared arrays written inside the loop -> (shadow array name, elements per CTA)."""
    sizes = {d.name: d.size for d in kernel.shared}
    out = {}
    for s in walk(loop.body):
        if isinstance(s, Store) and s.space == "shared" and s.array not in out:
            out[s.array] = (shadow_array(kernel.name, s.array), sizes[s.array])
    return out


def mirror_store(s: Store, shadows: dict, mech: Mech) -> tuple:
    name, n = shadows[s.array]
    idx = BinOp("+", BinOp("*", Var("ctaid"), Const(n)), s.index)
    m = Store(name, idx, s.value, wt=mech is Mech.WT)
    if mech is Mech.CLWB:
        return (s, m, clwb_of(m))
    return (s, m)


def loop_tail(d: PersistencyDirective, atomics: bool = False) -> tuple:
    """Iteration-closing persist barrier; atomics are clwb'd, so wt then needs the clwb fence."""
    if d.mech is Mech.L2WB:
        return l2wb_barrier(d.durable_wpq) + (Simple("syncthreads"),)
    if d.mech is Mech.WT and not atomics:
        return (Simple("sfence"),)
    return persist_fence(d.durable_wpq)


def transform_epoch_loop(kernel: KernelProgram, loop: For | int | None,
                         d: PersistencyDirective, mirror_outside: bool = False,
                         iteration_hook=None) -> tuple[KernelProgram, list[DeviceDecl]]:
    """Shadow shared arrays in global memory and close an epoch at every iteration end.

    Returns the new kernel and the shadow device arrays it needs. With
    ``mirror_outside`` shared stores before the loop are mirrored as well, so
    the shadow equals the shared state at every iteration boundary.
    ``iteration_hook(body)`` may wrap the instrumented iteration body.
    """
    _check(d, Scope.LOOP)
    target = find_loop(kernel, loop)
    shadows = shadow_decls(kernel, target)
    store_fn = {Mech.WT: _wt_rewrite, Mech.CLWB: _clwb_rewrite}.get(d.mech, lambda s: None)
    tail = loop_tail(d, kernel.has_atomics())

    def fn_in(s):
        if isinstance(s, Store) and s.space == "shared" and s.array in shadows:
            return mirror_store(s, shadows, d.mech)
        return store_fn(s)

    def rebuild(stmts, before_loop: list[bool]):
        out = []
        for s in stmts:
            if s is target:
                body = rewrite(s.body, fn_in) + tail
                if iteration_hook is not None:
                    body = iteration_hook(body)
                # the pragma names the instrumented loop and the directive actually applied
                line = s.directive.line if s.directive is not None else s.line
                out.append(replace(s, body=body, directive=replace(d, line=line)))
                before_loop[0] = False
            elif before_loop[0] and mirror_outside:
                out.extend(rewrite((s,), fn_in))
            else:
                out.extend(rewrite((s,), store_fn))
        return tuple(out)

    if not any(s is target for s in kernel.body):
        raise PassError("loop-level epochs apply to a top-level loop of the kernel")
    body = rebuild(kernel.body, [True])
    k = replace(kernel, body=body,
                exit=None if kernel.exit is None else rewrite(kernel.exit, store_fn))
    k, _ = ensure_postdominant_exit(k)
    # the kernel end closes the last epoch; no barrier is needed after it
    k = append_at_exit(k, tail[:-1] if d.mech is Mech.L2WB else tail)
    decls = [device(name, per_cta(n)) for name, n in shadows.values()]
    return k, decls
