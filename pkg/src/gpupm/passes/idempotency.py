"""Static idempotency analysis over the thread/iteration domain.

Every thread of the launch is partially evaluated: registers hold a concrete
integer when their value depends only on ``tid``, ``ctaid``, grid constants,
scalar arguments and loop iterators, and are unknown once they depend on
memory. Branches on unknown conditions explore both sides. The result is the
exact set of affine addresses each region may touch plus the arrays touched
through unknown (opaque) addresses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from gpupm.lang.ir import (
    Assign, Atomic, Call, Clwb, Const, Expr, For, If, Load, Neg, Simple, Store, Var,
)
from gpupm.refexec.interp import LaunchContext, binop, wrap

CLEAN, HAS_ATOMIC, ANTI_DEPENDENCY, OPAQUE_ALIAS = "clean", "hasAtomic", "antiDependency", "opaqueAlias"
_LOOP_CAP = 4096


@dataclass(frozen=True)
class Access:
    kind: str  # r | w
    array: str  # physical name; shared arrays are prefixed "shared."
    index: int | None  # None = opaque
    ctaid: int
    tid: int
    iteration: int | None  # value of the region loop's iterator, if inside it
    stmt: object = field(compare=False, hash=False, default=None)
    atomic: bool = False


def _peval(e: Expr, env: dict) -> int | None:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return env.get(e.name)
    if isinstance(e, Neg):
        v = _peval(e.operand, env)
        return None if v is None else wrap(-v)
    a, b = _peval(e.left, env), _peval(e.right, env)
    if a is None or b is None:
        return None
    if isinstance(e, Call):
        return min(a, b) if e.fn == "min" else max(a, b)
    try:
        return binop(e.op, a, b)
    except ZeroDivisionError:
        return None


def _join(a: dict | None, b: dict | None) -> dict | None:
    if a is None:
        return b
    if b is None:
        return a
    return {k: (a[k] if a.get(k) == b.get(k) else None) for k in set(a) | set(b)}


class _ThreadWalk:
    def __init__(self, ctx: LaunchContext, ctaid: int, tid: int, loop: For | None,
                 include_shared: bool):
        self.ctx = ctx
        self.ctaid, self.tid = ctaid, tid
        self.loop = loop
        self.include_shared = include_shared
        self.iteration: int | None = None
        self.out: list[Access] = []
        self.returned: list[dict] = []

    def rec(self, kind, s, space, array, idx, atomic=False):
        if space == "shared":
            if not self.include_shared:
                return
            name = "shared." + array
        else:
            name = self.ctx.binding.get(array, array)
        self.out.append(Access(kind, name, idx, self.ctaid, self.tid, self.iteration, s, atomic))

    def run(self) -> list[Access]:
        k = self.ctx.kernel
        env = {"tid": self.tid, "ctaid": self.ctaid, "ctadim": self.ctx.grid.cta_dim,
               "griddim": self.ctx.grid.grid_dim, **self.ctx.scalars}
        end = self.visit(k.body, env)
        for r in self.returned:
            end = _join(end, r)
        if k.exit is not None and end is not None:
            self.visit(k.exit, end)
        return self.out

    def visit(self, stmts, env: dict | None) -> dict | None:
        for s in stmts:
            if env is None:
                return None
            if isinstance(s, Assign):
                env = {**env, s.dst: _peval(s.expr, env)}
            elif isinstance(s, Load):
                self.rec("r", s, s.space, s.array, _peval(s.index, env))
                env = {**env, s.dst: None}
            elif isinstance(s, Store):
                self.rec("w", s, s.space, s.array, _peval(s.index, env))
            elif isinstance(s, Atomic):
                idx = _peval(s.index, env)
                self.rec("r", s, "global", s.array, idx, True)
                self.rec("w", s, "global", s.array, idx, True)
            elif isinstance(s, Clwb):
                pass
            elif isinstance(s, Simple):
                if s.op == "return":
                    self.returned.append(env)
                    return None
            elif isinstance(s, If):
                c = _peval(s.cond, env)
                if c is None:
                    env = _join(self.visit(s.then, dict(env)), self.visit(s.orelse, dict(env)))
                else:
                    env = self.visit(s.then if c else s.orelse, env)
            elif isinstance(s, For):
                env = self.loop_stmt(s, env)
        return env

    def loop_stmt(self, s: For, env: dict) -> dict | None:
        tagged = s is self.loop
        lo = _peval(s.lo, env)
        v, n = lo, 0
        if lo is not None:
            cur = dict(env)
            while n < _LOOP_CAP:
                hi, step = _peval(s.hi, cur), _peval(s.step, cur)
                if hi is None or step is None or step == 0:
                    break
                if (v >= hi) if step > 0 else (v <= hi):
                    return {**cur, s.var: v}
                cur[s.var] = v
                if tagged:
                    self.iteration = v
                nxt = self.visit(s.body, cur)
                if tagged:
                    self.iteration = None
                if nxt is None:
                    return None
                cur = nxt
                v = wrap(cur[s.var] + step)
                n += 1
            env = cur
        # unknown trip count: iterate abstractly until the environment is stable
        state = dict(env)
        for _ in range(8):
            inner = {**state, s.var: None}
            out = self.visit(s.body, inner)
            new = _join(state, out)
            if new == state:
                break
            state = new
        return {**state, s.var: None}


def enumerate_accesses(ctx: LaunchContext, loop: For | None = None,
                       include_shared: bool = False, ctas=None) -> list[Access]:
    out: list[Access] = []
    for c in (range(ctx.grid.grid_dim) if ctas is None else ctas):
        for t in range(ctx.grid.cta_dim):
            out += _ThreadWalk(ctx, c, t, loop, include_shared).run()
    return out


@dataclass
class IdempotencyResult:
    idempotent: bool
    reason: str
    must_log: frozenset = frozenset()  # {(array, index)}
    whole_arrays: frozenset = frozenset()  # arrays that must be logged entirely
    per_unit: dict = field(default_factory=dict)  # unit key -> {(array, index)}
    opaque_writes: frozenset = frozenset()

    def ranges(self) -> list[tuple[str, int, int]]:
        """mustLog as sorted ``(array, start, stop)`` runs of consecutive indices."""
        out: list[tuple[str, int, int]] = []
        for arr, idx in sorted(self.must_log):
            if out and out[-1][0] == arr and out[-1][2] == idx:
                out[-1] = (arr, out[-1][1], idx + 1)
            else:
                out.append((arr, idx, idx + 1))
        return out

    def covers(self, locations) -> bool:
        return all(loc in self.must_log or loc[0] in self.whole_arrays for loc in locations)

    def log_bytes(self, sizes: dict[str, int], word: int = 4) -> int:
        extra = sum(sizes[a] for a in self.whole_arrays)
        part = sum(1 for a, _ in self.must_log if a not in self.whole_arrays)
        return word * (extra + part)


_RANK = {CLEAN: 0, ANTI_DEPENDENCY: 1, OPAQUE_ALIAS: 2, HAS_ATOMIC: 3}


def _unit(a: Access, scope: str):
    if scope == "kernel":
        return ()
    if scope == "cta":
        return (a.ctaid,)
    return (a.ctaid, a.iteration)


def analyze_idempotency(region, kernel=None, *, scope: str | None = None,
                        ctx: LaunchContext | None = None, loop: For | None = None
                        ) -> IdempotencyResult:
    """Conservative static verdict for a kernel, CTA or loop-iteration region.

    ``region`` is either a :class:`gpupm.refexec.regions.Region` or a scope
    name (``"kernel"``, ``"cta"``, ``"loop"``) together with ``ctx``.
    The verdict quantifies over all CTAs (and iterations) of the launch.
    """
    if isinstance(region, str):
        scope = region
    else:
        scope, ctx, loop = region.kind, region.ctx, loop or region.loop
    if ctx is None:
        raise ValueError("a launch context is required")
    if scope == "loop" and loop is None:
        from gpupm.refexec.regions import annotated_loop

        loop = annotated_loop(ctx.kernel)
    accesses = enumerate_accesses(ctx, loop if scope == "loop" else None,
                                  include_shared=scope == "loop")
    if scope == "loop":
        accesses = [a for a in accesses if a.iteration is not None]

    reason = CLEAN
    must: set = set()
    whole: set = set()
    per_unit: dict = {}
    opaque_w: set = set()
    units: dict = {}
    for a in accesses:
        units.setdefault(_unit(a, scope), []).append(a)

    for key, accs in units.items():
        reads = {(a.array, a.index) for a in accs if a.kind == "r" and a.index is not None}
        writes = {(a.array, a.index) for a in accs if a.kind == "w" and a.index is not None}
        r_arrays = {a.array for a in accs if a.kind == "r"}
        w_arrays = {a.array for a in accs if a.kind == "w"}
        op_r = {a.array for a in accs if a.kind == "r" and a.index is None}
        op_w = {a.array for a in accs if a.kind == "w" and a.index is None}
        opaque_w |= op_w
        unit_log = set(writes & reads)
        if unit_log:
            reason = max(reason, ANTI_DEPENDENCY, key=_RANK.get)
        aliased = (op_w & r_arrays) | (op_r & w_arrays)
        if aliased:
            reason = max(reason, OPAQUE_ALIAS, key=_RANK.get)
            whole |= op_w & r_arrays
            unit_log |= {w for w in writes if w[0] in aliased}
        atomics = [a for a in accs if a.atomic]
        if atomics:
            reason = HAS_ATOMIC
            for a in atomics:
                if a.index is None:
                    whole.add(a.array)
                else:
                    unit_log.add((a.array, a.index))
        if unit_log:
            per_unit[key] = unit_log
            must |= unit_log
    idem = reason == CLEAN
    return IdempotencyResult(idem, reason, frozenset(must), frozenset(whole), per_unit,
                             frozenset(opaque_w))


def address_kind(stmt, ctx: LaunchContext) -> str:
    """``affine`` if the statement's index is affine in tid/ctaid/loop iterators, else ``opaque``."""
    from gpupm.lang.affine import walk_defs

    consts = {"ctadim": ctx.grid.cta_dim, "griddim": ctx.grid.grid_dim, **ctx.scalars}
    dw = walk_defs(ctx.kernel, consts)
    from gpupm.lang.affine import eval_affine

    return "affine" if eval_affine(stmt.index, dw.before[id(stmt)]) is not None else "opaque"
