"""Durable transactions with undo logging at kernel, CTA and loop scope.

Every transaction follows the same protocol: persist the undo log, persist
flag=InTx, run and persist the scope's stores, persist flag=Complete. When
idempotency analysis proves the scope re-executable the log is dropped, and
otherwise it is reduced to the locations that are both read and overwritten.

Log layout: a log array mirrors the data array it protects index for index,
so each CTA's entries occupy the same contiguous slice its outputs do.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from gpupm.lang.affine import BUILTIN, walk_defs
from gpupm.lang.cfg import ensure_postdominant_exit
from gpupm.lang.ir import (
    Atomic, BinOp, Clwb, Const, DeviceDecl, Flag, For, HostOp, If, KernelProgram, Launch, Load,
    MemcpyD2D, Mech, Model, PersistencyDirective, Scope, SetFlag, Simple, Stmt, Store, Var,
    stmt_def, stmt_uses, walk,
)
from gpupm.lang.slicing import SliceUnavailable, slice_address
from gpupm.passes.common import (
    PassError, append_at_exit, device, flag_array, host_flag, last_iter_array,
    last_log_iter_array, log_array, per_cta, persist_fence, rewrite_kernel, tid0,
)
from gpupm.passes.epoch import find_loop, transform_epoch_cta, transform_epoch_loop
from gpupm.passes.idempotency import IdempotencyResult
from gpupm.refexec.image import is_aux

MUTATIONS = ("flag_before_log", "no_output_persist", "no_pcommit", "unpersisted_log")


class Promote(Exception):
    """The requested scope cannot protect this kernel; fall back to kernel scope."""


@dataclass
class LoopTx:
    var: str
    lo_known: bool
    shadows: dict  # shared array -> (shadow array, elements per CTA)
    logs: dict  # shared array -> log array
    last_iter: str
    last_log_iter: str


@dataclass
class LaunchTx:
    """What recovery needs to know about one transactional launch."""

    index: int
    kernel: str
    scope: str  # kernel | cta | loop
    idempotent: bool
    flag: str  # host flag (kernel scope) or device flag array
    log_map: dict = field(default_factory=dict)  # log array -> data array (same indices)
    logged: dict = field(default_factory=dict)  # cta -> {(data array, index)}
    log_ranges: list = field(default_factory=list)  # (log, data, start, count), kernel scope
    host_backed: set = field(default_factory=set)  # restored from the host-side input copy
    loop: LoopTx | None = None
    done: str | None = None  # host flag closing a loop-scope launch
    note: str = ""


# ------------------------------------------------------------------ CTA scope

def _free_vars(stmts) -> set[str]:
    """Registers read by ``stmts`` before being defined by them."""
    out: set[str] = set()

    def visit(ss, defined: set[str]) -> set[str]:
        for s in ss:
            out.update(stmt_uses(s) - defined)
            if isinstance(s, For):
                visit(s.body, defined | {s.var})
                defined = defined | {s.var}
            elif isinstance(s, If):
                visit(s.then, set(defined))
                visit(s.orelse, set(defined))
            else:
                d = stmt_def(s)
                if d:
                    defined = defined | {d}
        return defined

    visit(stmts, set())
    return out


def split_prefix(kernel: KernelProgram) -> int:
    """Index of the first top-level statement that may store to global memory or return."""
    for i, s in enumerate(kernel.body):
        for t in walk((s,)):
            if (isinstance(t, Store) and t.space == "global") or isinstance(t, Atomic):
                return i
            if isinstance(t, Simple) and t.op in ("return", "syncthreads"):
                return i
    return len(kernel.body)


def log_code(kernel: KernelProgram, stores: list, wt: bool = True, clwb: bool = False
             ) -> tuple[Stmt, ...]:
    """Copy the old value of every given store target into its log array.

    Addresses are regenerated at the insertion point (right before the first
    output store) with the same slicing used for exit persists.
    """
    cut = split_prefix(kernel)
    dw = walk_defs(kernel)
    prefix_ids = {id(t) for s in kernel.body[:cut] for t in walk((s,))}
    code: list = []
    seen: set = set()
    for s in stores:
        try:
            sl = slice_address(s, kernel, dw, tag="l")
        except SliceUnavailable as err:
            raise Promote(f"undo-log address of {s.array!r} cannot be regenerated: {err}")
        log = log_array(kernel.name, s.array)
        inner: tuple = (Load("__lv", s.array, sl.index), Store(log, sl.index, Var("__lv"), wt=wt))
        if clwb:
            inner += (Clwb(log, sl.index),)
        emitted = sl.emit(inner)
        for v in _free_vars(emitted):
            info = dw.final.get(v)
            if info is None or info.defn is BUILTIN:
                continue
            if id(info.defn) not in prefix_ids:
                raise Promote(f"undo-log address of {s.array!r} depends on {v!r}, "
                              "computed after the first output store")
        if emitted not in seen:
            seen.add(emitted)
            code.extend(emitted)
    return tuple(code)


def _strip_persist(stmts) -> tuple:
    from gpupm.passes.common import rewrite

    def fn(s):
        if isinstance(s, Clwb) or (isinstance(s, Simple) and s.op in ("sfence", "pcommit", "l2wb")):
            return ()
        if isinstance(s, Store) and s.wt:
            return (replace(s, wt=False),)
        return None
    return rewrite(stmts, fn)


def _strip_pcommit(k: KernelProgram) -> KernelProgram:
    return rewrite_kernel(k, lambda s: () if isinstance(s, Simple) and s.op == "pcommit" else None)


def transform_tx_cta(kernel: KernelProgram, d: PersistencyDirective, stores_to_log: list | None,
                     mutate: str | None = None, log_clwb: bool = False) -> KernelProgram:
    """Wrap each CTA in a durable transaction.

    ``stores_to_log`` is None for the idempotent form (no log, every thread
    raises InTx right before the first output store); otherwise the listed
    store statements get their old values logged first.
    """
    if kernel.has_atomics():
        raise Promote("atomics cannot be re-executed per CTA")
    cut = split_prefix(kernel)
    prefix, rest = kernel.body[:cut], kernel.body[cut:]
    fence = persist_fence(d.durable_wpq)
    in_tx = tid0((Store(flag_array(kernel.name), Var("ctaid"), Const(Flag.IN_TX.value),
                        wt=True),) + fence)
    if stores_to_log is None:
        head = (Store(flag_array(kernel.name), Var("ctaid"), Const(Flag.IN_TX.value), wt=True),
                Simple("sfence"))
    else:
        unpersisted = mutate == "unpersisted_log"
        logs = log_code(kernel, stores_to_log, wt=not unpersisted, clwb=log_clwb)
        log_fence = () if unpersisted else fence
        if mutate == "flag_before_log":
            head = (in_tx,) + logs + log_fence + (Simple("syncthreads"),)
        else:
            head = logs + log_fence + (Simple("syncthreads"), in_tx, Simple("syncthreads"))
    k = replace(kernel, body=tuple(prefix) + head + tuple(rest))
    if mutate != "no_output_persist":
        k = transform_epoch_cta(k, PersistencyDirective(Model.EPOCH, Scope.CTA, d.mech,
                                                        d.durable_wpq))
    k, _ = ensure_postdominant_exit(k)
    done = tid0((Store(flag_array(kernel.name), Var("ctaid"), Const(Flag.COMPLETE.value),
                       wt=True),) + fence)
    k = append_at_exit(k, (Simple("syncthreads"), done))
    if mutate == "no_pcommit":
        k = _strip_pcommit(k)
    return replace(k, directive=_tx_directive(d, Scope.CTA, stores_to_log is None))


def _tx_directive(d: PersistencyDirective, scope: Scope, idem: bool) -> PersistencyDirective:
    mech = Mech.L2WB if scope is Scope.KERNEL else d.mech
    return PersistencyDirective(Model.EPOCH, scope, mech, d.durable_wpq, True, idem)


# ------------------------------------------------------------------ loop scope

def _upward_exposed(stmts, defined: set[str]) -> set[str]:
    exposed: set[str] = set()

    def visit(ss, defs: set[str]) -> set[str]:
        for s in ss:
            exposed.update(stmt_uses(s) - defs)
            if isinstance(s, For):
                visit(s.body, defs | {s.var})
                defs = defs | {s.var}
            elif isinstance(s, If):
                a = visit(s.then, set(defs))
                b = visit(s.orelse, set(defs))
                defs = a & b
            else:
                dd = stmt_def(s)
                if dd:
                    defs = defs | {dd}
        return defs

    visit(stmts, set(defined))
    return exposed


def _defs(stmts) -> set[str]:
    return {stmt_def(s) for s in walk(stmts) if stmt_def(s)}


def carried_registers(kernel: KernelProgram, loop: For) -> set[str]:
    """Registers whose value flows from one iteration to the next or out of the loop."""
    i = next(n for n, s in enumerate(kernel.body) if s is loop)
    body_defs = _defs(loop.body)
    carried = _upward_exposed(loop.body, {loop.var}) & body_defs
    tail = kernel.body[i + 1:] + (kernel.exit or ())
    carried |= _upward_exposed(tail, {loop.var}) & body_defs
    return carried


def transform_tx_loop(kernel: KernelProgram, d: PersistencyDirective, mutate: str | None = None
                      ) -> tuple[KernelProgram, list[DeviceDecl], LoopTx]:
    if kernel.has_atomics():
        raise Promote("atomics cannot be re-executed per loop iteration")
    try:
        loop = find_loop(kernel)
    except PassError as err:
        raise Promote(str(err))
    if not any(s is loop for s in kernel.body):
        raise Promote("loop-level transactions need a top-level loop")
    carried = carried_registers(kernel, loop)
    if carried:
        raise Promote(f"registers {sorted(carried)} carry state across iterations")
    name = kernel.name
    fence = persist_fence(d.durable_wpq)
    flag, li, lli = flag_array(name), last_iter_array(name), last_log_iter_array(name)
    holder: dict = {}

    def hook(body):
        shadows = holder["shadows"]
        head: list = []
        for sh, (shadow, n) in sorted(shadows.items()):
            idx = BinOp("+", BinOp("*", Var("ctaid"), Const(n)), Var("__lj"))
            copy = (Load("__lv", shadow, idx),
                    Store(log_array(name, sh), idx, Var("__lv"), wt=mutate != "unpersisted_log"))
            head.append(For("__lj", Var("tid"), Const(n), Var("ctadim"), copy))
        head.append(tid0((Store(lli, Var("ctaid"), Var(loop.var), wt=True),)))
        in_tx = tid0((Store(flag, Var("ctaid"), Const(Flag.IN_TX.value), wt=True),) + fence)
        log_fence = () if mutate == "unpersisted_log" else fence
        if mutate == "flag_before_log":
            head = [in_tx] + head + list(log_fence) + [Simple("syncthreads")]
        else:
            head += list(log_fence) + [Simple("syncthreads"), in_tx, Simple("syncthreads")]
        if mutate == "no_output_persist":
            body = _strip_persist(body)
        sync = () if d.mech is Mech.L2WB else (Simple("syncthreads"),)
        close = tid0((Store(li, Var("ctaid"), Var(loop.var), wt=True), Simple("sfence"),
                      Store(flag, Var("ctaid"), Const(Flag.COMPLETE.value), wt=True))
                     + fence)
        return tuple(head) + tuple(body) + sync + (close, Simple("syncthreads"))

    from gpupm.passes.epoch import shadow_decls

    holder["shadows"] = shadow_decls(kernel, loop)
    ep_dir = PersistencyDirective(Model.EPOCH, Scope.LOOP, d.mech, d.durable_wpq)
    k, decls = transform_epoch_loop(kernel, loop, ep_dir, mirror_outside=True,
                                    iteration_hook=hook)
    if mutate == "no_pcommit":
        k = _strip_pcommit(k)
    k = replace(k, directive=kernel.directive)
    shadows = holder["shadows"]
    decls += [device(log_array(name, sh), per_cta(n)) for sh, (_, n) in shadows.items()]
    decls += [device(li, Var("griddim")), device(lli, Var("griddim"))]
    info = LoopTx(loop.var, True, dict(shadows),
                  {sh: log_array(name, sh) for sh in shadows}, li, lli)
    return k, decls, info


# ------------------------------------------------------------------ kernel scope

def kernel_tx_steps(launch: Launch, index: int, log_ranges: list, d: PersistencyDirective,
                    idempotent: bool, mutate: str | None = None) -> list:
    """Host-side transaction around one launch.

    ``memcpy(log); flag=InTx; sync; launch; sync; l2wb; [pcommit;] sync; flag=Complete``.
    The memcpy and the first sync disappear when nothing needs logging.
    """
    flag = host_flag(launch.kernel, index)
    copies = [MemcpyD2D(log, data, start, count) for log, data, start, count in log_ranges]
    set_tx = SetFlag(flag, Flag.IN_TX)
    if mutate == "flag_before_log":
        pre = [set_tx] + copies
    else:
        pre = copies + [set_tx]
    if copies:
        pre.append(HostOp("sync"))
    post = [HostOp("sync")]
    if mutate != "no_output_persist":
        post.append(HostOp("l2wb"))
        if not d.durable_wpq and mutate != "no_pcommit":
            post.append(HostOp("pcommit"))
    post += [HostOp("sync"), SetFlag(flag, Flag.COMPLETE)]
    return pre + [launch] + post


def ranges_of(locs) -> list[tuple[str, int, int]]:
    """Sorted ``(array, start, count)`` runs of consecutive indices."""
    out: list[list] = []
    for arr, idx in sorted(locs):
        if out and out[-1][0] == arr and out[-1][1] + out[-1][2] == idx:
            out[-1][2] += 1
        else:
            out.append([arr, idx, 1])
    return [tuple(r) for r in out]


def transform_tx(unit, scope: str, d: PersistencyDirective, idem: IdempotencyResult | None,
                 **kw):
    """Scope dispatcher over a single kernel (cta/loop) or launch step (kernel).

    cta: ``kw['stores']`` lists the stores to log (ignored when idempotent).
    kernel: ``unit`` is a Launch, ``kw`` gives ``index`` and ``log_ranges``.
    """
    idempotent = bool(idem and idem.idempotent and d.idem)
    if scope == "cta":
        stores = None if idempotent else kw.get("stores", _logged_stores(unit, None, False))
        return transform_tx_cta(unit, d, stores, kw.get("mutate"))
    if scope == "loop":
        return transform_tx_loop(unit, d, kw.get("mutate"))
    if scope == "kernel":
        return kernel_tx_steps(unit, kw.get("index", 0), kw.get("log_ranges", []), d,
                               idempotent, kw.get("mutate"))
    raise PassError(f"unknown transaction scope {scope!r}")


def _logged_stores(kernel: KernelProgram, accesses, reduce: bool, must=None) -> list:
    """Store statements whose targets need an undo log entry."""
    stores = [s for s in kernel.all_stmts()
              if isinstance(s, Store) and s.space == "global" and not is_aux(s.array)]
    if not reduce:
        return stores
    hit = {id(a.stmt) for a in accesses
           if a.kind == "w" and a.stmt is not None and (a.array, a.index) in must}
    return [s for s in stores if id(s) in hit]
