"""Affine index forms and a reaching-definition walk over structured kernels.

One forward walk records, before every statement, which definition of each
register reaches it and, when grid constants are supplied, the register's
value as an affine form over ``tid``, ``ctaid`` and loop iterators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from gpupm.lang.ir import (
    BUILTINS, Assign, BinOp, Call, Const, Expr, For, If, KernelProgram, Load, Neg,
    Simple, Stmt, Var,
)


@dataclass(frozen=True)
class Affine:
    """``const + sum(coeff * symbol)`` with integer coefficients."""

    terms: tuple[tuple[str, int], ...] = ()
    const: int = 0

    @staticmethod
    def of(const: int = 0, **coeffs: int) -> "Affine":
        return Affine(tuple(sorted((k, v) for k, v in coeffs.items() if v)), const)

    @staticmethod
    def symbol(name: str) -> "Affine":
        return Affine(((name, 1),), 0)

    def coeffs(self) -> dict[str, int]:
        return dict(self.terms)

    def symbols(self) -> set[str]:
        return {k for k, _ in self.terms}

    def __add__(self, other: "Affine") -> "Affine":
        c = self.coeffs()
        for k, v in other.terms:
            c[k] = c.get(k, 0) + v
        return Affine(tuple(sorted((k, v) for k, v in c.items() if v)), self.const + other.const)

    def scale(self, k: int) -> "Affine":
        if k == 0:
            return Affine()
        return Affine(tuple((s, v * k) for s, v in self.terms), self.const * k)

    def is_const(self) -> bool:
        return not self.terms

    def evaluate(self, values: dict[str, int]) -> int:
        return self.const + sum(v * values[s] for s, v in self.terms)

    def to_expr(self, rename: dict[str, str] | None = None) -> Expr:
        rename = rename or {}
        out: Expr | None = None
        for s, v in self.terms:
            term: Expr = Var(rename.get(s, s))
            if v != 1:
                term = BinOp("*", Const(v), term)
            out = term if out is None else BinOp("+", out, term)
        if out is None:
            return Const(self.const)
        if self.const:
            out = BinOp("+", out, Const(self.const))
        return out


class _Ambiguous:
    def __repr__(self) -> str:
        return "AMBIG"


AMBIG = _Ambiguous()
BUILTIN = "builtin"


@dataclass(frozen=True)
class RegInfo:
    defn: object  # defining Stmt, For (iterator), BUILTIN, or AMBIG
    affine: Affine | None = None


Env = dict[str, RegInfo]


def _join_info(a: RegInfo | None, b: RegInfo | None) -> RegInfo:
    if a is not None and b is not None and a.defn is b.defn and a.affine == b.affine:
        return a
    return RegInfo(AMBIG, None)


def join_env(a: Env | None, b: Env | None) -> Env | None:
    if a is None:
        return b
    if b is None:
        return a
    keys = set(a) | set(b)
    return {k: _join_info(a.get(k), b.get(k)) for k in keys}


def eval_affine(e: Expr, env: Env) -> Affine | None:
    if isinstance(e, Const):
        return Affine((), e.value)
    if isinstance(e, Var):
        info = env.get(e.name)
        return None if info is None else info.affine
    if isinstance(e, Neg):
        inner = eval_affine(e.operand, env)
        return None if inner is None else inner.scale(-1)
    if isinstance(e, Call):
        return None
    a, b = eval_affine(e.left, env), eval_affine(e.right, env)
    if a is None or b is None:
        return None
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a + b.scale(-1)
    if e.op == "*":
        if a.is_const():
            return b.scale(a.const)
        if b.is_const():
            return a.scale(b.const)
        return None
    if e.op == "<<" and b.is_const() and b.const >= 0:
        return a.scale(1 << b.const)
    if a.is_const() and b.is_const():
        from gpupm.refexec.interp import binop

        try:
            return Affine((), binop(e.op, a.const, b.const))
        except ZeroDivisionError:
            return None
    return None


@dataclass
class DefWalk:
    """Result of :func:`walk_defs`: per-statement environments and contexts."""

    before: dict[int, Env] = field(default_factory=dict)  # id(stmt) -> env before it
    head: dict[int, Env] = field(default_factory=dict)  # id(For) -> env at loop head
    context: dict[int, tuple] = field(default_factory=dict)  # id(stmt) -> enclosing chain
    order: dict[int, int] = field(default_factory=dict)  # id(stmt) -> pre-order index
    stmts: dict[int, Stmt] = field(default_factory=dict)
    final: Env = field(default_factory=dict)  # env at the very end of the kernel

    def env_at(self, s: Stmt) -> Env:
        if isinstance(s, For):
            return self.head[id(s)]
        return self.before[id(s)]


def initial_env(kernel: KernelProgram, consts: dict[str, int] | None) -> Env:
    env: Env = {}
    for b in BUILTINS:
        aff = None
        if b in ("tid", "ctaid"):
            aff = Affine.symbol(b)
        elif consts is not None and b in consts:
            aff = Affine((), consts[b])
        env[b] = RegInfo(BUILTIN, aff)
    for p in kernel.params:
        if p.space == "scalar":
            aff = Affine((), consts[p.name]) if consts and p.name in consts else None
            env[p.name] = RegInfo(BUILTIN, aff)
    return env


def walk_defs(kernel: KernelProgram, consts: dict[str, int] | None = None) -> DefWalk:
    """Forward walk recording reaching definitions (and affine values)."""
    out = DefWalk()
    counter = [0]
    returns: list[Env] = []

    def visit(stmts, env: Env | None, ctx: tuple) -> Env | None:
        for s in stmts:
            out.stmts[id(s)] = s
            out.context[id(s)] = ctx
            if id(s) not in out.order:
                out.order[id(s)] = counter[0]
                counter[0] += 1
            if env is None:
                # unreachable after a return; still record something sane
                env = {}
            out.before[id(s)] = dict(env)
            if isinstance(s, Assign):
                env = dict(env)
                env[s.dst] = RegInfo(s, eval_affine(s.expr, env))
            elif isinstance(s, Load):
                env = dict(env)
                env[s.dst] = RegInfo(s, None)
            elif isinstance(s, For):
                env = loop(s, env, ctx)
            elif isinstance(s, If):
                t = visit(s.then, dict(env), ctx + ((s, True),))
                f = visit(s.orelse, dict(env), ctx + ((s, False),))
                env = join_env(t, f)
            elif isinstance(s, Simple) and s.op == "return":
                returns.append(env)
                env = None
        return env

    def loop(s: For, env: Env, ctx: tuple) -> Env:
        head = dict(env)
        for _ in range(64):
            inner = dict(head)
            inner[s.var] = RegInfo(s, Affine.symbol(s.var))
            body_out = visit(s.body, inner, ctx + (s,))
            # the iterator itself is re-derived at the head, exclude it from the join
            new_head = join_env(env, body_out)
            if new_head is None:
                new_head = dict(env)
            new_head = {k: v for k, v in new_head.items() if k != s.var}
            if s.var in env:
                new_head[s.var] = env[s.var]
            if new_head == head:
                break
            head = new_head
        inner = dict(head)
        inner[s.var] = RegInfo(s, Affine.symbol(s.var))
        out.head[id(s)] = inner
        after = dict(head)
        after[s.var] = RegInfo(s, None)
        return after

    end = visit(kernel.body, initial_env(kernel, consts), ())
    for r in returns:
        end = join_env(end, r)
    if kernel.exit is not None:
        end = visit(kernel.exit, end if end is not None else {}, ())
    out.final = end if end is not None else {}
    return out
