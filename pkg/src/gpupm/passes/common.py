"""Shared helpers for the instrumentation passes."""

from __future__ import annotations

from dataclasses import replace
from typing import Callable

from gpupm.lang.ir import (
    Atomic, BinOp, Clwb, Const, DeviceDecl, For, If, KernelProgram, Simple, Stmt, Store, Var,
)
from gpupm.refexec.image import region_of  # noqa: F401  (re-exported for the passes)


class PassError(Exception):
    """A transform cannot be applied as requested."""


# ------------------------------------------------------------ aux array names

def flag_array(kernel: str) -> str:
    return f"__flag_{kernel}"


def log_array(kernel: str, array: str) -> str:
    return f"__log_{kernel}_{array}"


def shadow_array(kernel: str, shared: str) -> str:
    return f"__shadow_{kernel}_{shared}"


def last_iter_array(kernel: str) -> str:
    return f"__last_iter_{kernel}"


def last_log_iter_array(kernel: str) -> str:
    return f"__last_log_iter_{kernel}"


def host_flag(kernel: str, launch: int) -> str:
    return f"__tx_{kernel}_{launch}"


def done_flag(kernel: str, launch: int) -> str:
    return f"__done_{kernel}_{launch}"


def per_cta(n: int) -> BinOp:
    return BinOp("*", Var("griddim"), Const(n))


def device(name: str, size, fill: int = 0) -> DeviceDecl:
    return DeviceDecl(name, size if not isinstance(size, int) else Const(size), fill)


# ------------------------------------------------------------ fence sequences

def persist_fence(durable_wpq: bool) -> tuple[Stmt, ...]:
    """``sfence`` plus the ``pcommit; sfence`` pair when the WPQs are volatile."""
    if durable_wpq:
        return (Simple("sfence"),)
    return (Simple("sfence"), Simple("pcommit"), Simple("sfence"))


def tid0(body: tuple[Stmt, ...]) -> If:
    return If(BinOp("==", Var("tid"), Const(0)), tuple(body))


def wt_flag(kernel: str, value: int, durable_wpq: bool) -> tuple[Stmt, ...]:
    """``st.wt flag[ctaid], value`` followed by a fence.

    A write-through store is acknowledged once it reaches NVM, so the plain
    ``sfence`` already covers it in both WPQ modes.
    """
    return (Store(flag_array(kernel), Var("ctaid"), Const(value), wt=True), Simple("sfence"))


# ------------------------------------------------------------ tree rewriting

def rewrite(stmts, fn: Callable[[Stmt], tuple[Stmt, ...] | None]) -> tuple[Stmt, ...]:
    """Bottom-up rewrite; ``fn`` returns a replacement sequence or None to keep."""
    out: list[Stmt] = []
    for s in stmts:
        if isinstance(s, For):
            s = replace(s, body=rewrite(s.body, fn))
        elif isinstance(s, If):
            s = replace(s, then=rewrite(s.then, fn), orelse=rewrite(s.orelse, fn))
        r = fn(s)
        out.extend((s,) if r is None else r)
    return tuple(out)


def rewrite_kernel(k: KernelProgram, fn) -> KernelProgram:
    body = rewrite(k.body, fn)
    ex = None if k.exit is None else rewrite(k.exit, fn)
    return replace(k, body=body, exit=ex)


def is_global_store(s: Stmt) -> bool:
    return isinstance(s, Store) and s.space == "global"


def append_at_exit(k: KernelProgram, code: tuple[Stmt, ...]) -> KernelProgram:
    """Append code where every thread passes last: the exit section if present, else the body end."""
    if k.exit is not None:
        return replace(k, exit=k.exit + tuple(code))
    return replace(k, body=k.body + tuple(code))


def clwb_of(s: Store | Atomic) -> Clwb:
    return Clwb(s.array, s.index)
