"""Backward slicing of store addresses so they can be recomputed at the kernel exit.

A store's index expression is rewritten in terms of registers that still hold
the same value at the exit. Registers that were overwritten, or that live
inside a loop, get their definition chain replicated under fresh ``__``-prefixed
names. Enclosing loops and guards are replicated too, so a slice placed at the
exit touches exactly the addresses the original store touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from gpupm.lang.affine import AMBIG, BUILTIN, DefWalk, Env, walk_defs
from gpupm.lang.ir import (
    Assign, Atomic, BinOp, Clwb, Const, Expr, For, If, KernelProgram, Load, Stmt, Store,
    Var, expr_vars, subst_expr,
)


class SliceUnavailable(Exception):
    """The address cannot be regenerated at the exit (e.g. it depends on clobbered memory)."""


def written_arrays(kernel: KernelProgram) -> set[str]:
    return {s.array for s in kernel.all_stmts() if isinstance(s, (Store, Atomic))}


def _same_ctx(a: tuple, b: tuple) -> bool:
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if isinstance(x, For) or isinstance(y, For):
            if x is not y:
                return False
        elif x[0] is not y[0] or x[1] != y[1]:
            return False
    return True


@dataclass
class AddressSlice:
    """Recomputation recipe for one store address.

    ``instrs`` are the replicated chain statements (the slice proper);
    ``levels[j]`` holds those that must run inside the first ``j`` replicated
    context entries; ``wrappers`` are the rewritten loop headers and guards.
    """

    store: Stmt
    array: str
    index: Expr
    instrs: list[Stmt]
    context: tuple
    wrappers: list[tuple]  # ("for", var, lo, hi, step) | ("if", cond)
    levels: list[list[Stmt]] = field(default_factory=list)

    def emit(self, inner: tuple[Stmt, ...] | None = None) -> tuple[Stmt, ...]:
        """Statements that recompute the address and then run ``inner``.

        ``inner`` defaults to a single ``clwb`` of the address.
        """
        if inner is None:
            inner = (Clwb(self.array, self.index),)
        body = tuple(self.levels[len(self.wrappers)]) + tuple(inner)
        for j in reversed(range(len(self.wrappers))):
            w = self.wrappers[j]
            if w[0] == "for":
                node: Stmt = For(w[1], w[2], w[3], w[4], body)
            else:
                node = If(w[1], body)
            body = tuple(self.levels[j]) + (node,)
        return body

    @property
    def is_direct(self) -> bool:
        """True when the address needs neither replicated statements nor context."""
        return not self.instrs and not self.wrappers


def slice_address(store: Stmt, kernel: KernelProgram, dw: DefWalk | None = None,
                  tag: str = "p") -> AddressSlice:
    """Slice the index of ``store`` (a Store, Atomic or Clwb) for the kernel exit."""
    dw = dw or walk_defs(kernel)
    if id(store) not in dw.context:
        raise ValueError("statement does not belong to this kernel")
    ctx = dw.context[id(store)]
    written = written_arrays(kernel)
    final = dw.final
    levels: list[list[tuple[int, Stmt]]] = [[] for _ in range(len(ctx) + 1)]
    emitted: dict[int, str] = {}
    loop_names = {id(c): f"__{tag}_{c.var}" for c in ctx if isinstance(c, For)}

    def available(var: str, d) -> bool:
        fi = final.get(var)
        return (fi is not None and fi.defn is d
                and not any(isinstance(c, For) for c in dw.context[id(d)]))

    def rename(expr: Expr, env: Env) -> Expr:
        mapping: dict[str, Expr] = {}
        for v in sorted(expr_vars(expr)):
            info = env.get(v)
            if info is None:
                raise SliceUnavailable(f"register {v!r} is undefined on some path")
            d = info.defn
            if d is BUILTIN:
                continue
            if d is AMBIG:
                raise SliceUnavailable(f"register {v!r} has several reaching definitions")
            if isinstance(d, For) and id(d) in loop_names:
                mapping[v] = Var(loop_names[id(d)])
            elif not available(v, d):
                mapping[v] = Var(replicate(v, d))
        return subst_expr(expr, mapping)

    def replicate(var: str, d) -> str:
        if id(d) in emitted:
            return emitted[id(d)]
        dctx = dw.context[id(d)]
        if len(dctx) > len(ctx) or not _same_ctx(dctx, ctx[:len(dctx)]):
            raise SliceUnavailable(f"definition of {var!r} is not on the store's path")
        if isinstance(d, For):
            raise SliceUnavailable(f"loop iterator {var!r} is used after its loop")
        name = f"__{tag}_{var}_{dw.order[id(d)]}"
        env = dw.before[id(d)]
        if isinstance(d, Assign):
            new: Stmt = Assign(name, rename(d.expr, env))
        elif isinstance(d, Load):
            if d.array in written:
                raise SliceUnavailable(
                    f"address depends on {d.array!r}, which the kernel overwrites")
            new = Load(name, d.array, rename(d.index, env), d.space)
        else:
            raise SliceUnavailable(f"cannot replicate definition of {var!r}")
        emitted[id(d)] = name
        levels[len(dctx)].append((dw.order[id(d)], new))
        return name

    wrappers: list[tuple] = []
    for c in ctx:
        if isinstance(c, For):
            lo = rename(c.lo, dw.before[id(c)])
            hi = rename(c.hi, dw.head[id(c)])
            step = rename(c.step, dw.head[id(c)])
            wrappers.append(("for", loop_names[id(c)], lo, hi, step))
        else:
            node, taken = c
            cond = rename(node.cond, dw.before[id(node)])
            wrappers.append(("if", cond if taken else BinOp("==", cond, Const(0))))
    index = rename(store.index, dw.before[id(store)])

    ordered = [[s for _, s in sorted(lv, key=lambda p: p[0])] for lv in levels]
    instrs = [s for _, s in sorted((p for lv in levels for p in lv), key=lambda p: p[0])]
    return AddressSlice(store, store.array, index, instrs, ctx, wrappers, ordered)
