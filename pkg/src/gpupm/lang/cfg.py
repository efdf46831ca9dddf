"""Lowering of structured kernels to flat code, basic blocks and dominance."""

from __future__ import annotations

from dataclasses import dataclass, field

from gpupm.lang.ir import Expr, For, If, KernelProgram, Simple, Stmt, walk


@dataclass
class Op:
    """One flat instruction.

    kinds: ``stmt`` (straight-line statement), ``jump``, ``branch`` (jump to
    ``target`` when ``expr`` is zero), ``loop_init``, ``loop_test`` (jump to
    ``target`` when the iterator reached ``hi``), ``loop_step`` (back-edge)
    and ``halt``.
    """

    kind: str
    stmt: Stmt | None = None
    target: int | None = None
    expr: Expr | None = None
    loop: int | None = None

    @property
    def is_terminator(self) -> bool:
        return self.kind in ("jump", "branch", "loop_test", "loop_step", "halt")


@dataclass
class FlatCode:
    ops: list[Op]
    loops: list[For]  # pre-order; index is the loop id used by ops
    exit_start: int  # first op of the exit section (the final halt if none)

    def loop_id(self, loop: For) -> int:
        for i, l in enumerate(self.loops):
            if l is loop:
                return i
        return self.loops.index(loop)


def lower(kernel: KernelProgram) -> FlatCode:
    ops: list[Op] = []
    loops: list[For] = []
    pending_returns: list[int] = []
    has_exit = kernel.exit is not None

    def emit(stmts) -> None:
        for s in stmts:
            if isinstance(s, For):
                lid = len(loops)
                loops.append(s)
                ops.append(Op("loop_init", s, loop=lid))
                head = len(ops)
                ops.append(Op("loop_test", s, loop=lid))
                emit(s.body)
                ops.append(Op("loop_step", s, target=head, loop=lid))
                ops[head].target = len(ops)
            elif isinstance(s, If):
                br = len(ops)
                ops.append(Op("branch", s, expr=s.cond))
                emit(s.then)
                if s.orelse:
                    j = len(ops)
                    ops.append(Op("jump", s))
                    ops[br].target = len(ops)
                    emit(s.orelse)
                    ops[j].target = len(ops)
                else:
                    ops[br].target = len(ops)
            elif isinstance(s, Simple) and s.op == "return":
                if has_exit:
                    pending_returns.append(len(ops))
                    ops.append(Op("jump", s))
                else:
                    ops.append(Op("halt", s))
            else:
                ops.append(Op("stmt", s))

    emit(kernel.body)
    exit_start = len(ops)
    if has_exit:
        emit(kernel.exit)
    ops.append(Op("halt"))
    for j in pending_returns:
        ops[j].target = exit_start
    return FlatCode(ops, loops, exit_start)


@dataclass
class BasicBlock:
    id: int
    start: int
    end: int  # exclusive
    ops: list[Op]

    @property
    def terminator(self) -> Op:
        return self.ops[-1]


@dataclass
class CFG:
    blocks: list[BasicBlock]
    succ: dict[int, list[int]]
    pred: dict[int, list[int]]
    entry: int
    exits: list[int]
    dom: dict[int, set[int]]
    postdom: dict[int, set[int]]
    back_edges: list[tuple[int, int]]
    loop_headers: dict[int, set[int]]  # header -> natural-loop body blocks
    reachable: set[int]
    diagnostics: list[str] = field(default_factory=list)
    code: FlatCode | None = None

    def block_of(self, op_index: int) -> int:
        for b in self.blocks:
            if b.start <= op_index < b.end:
                return b.id
        raise IndexError(op_index)

    def dominates(self, a: int, b: int) -> bool:
        return a in self.dom[b]

    def postdominates(self, a: int, b: int) -> bool:
        return a in self.postdom[b]

    def loop_depth(self, block: int) -> int:
        return sum(1 for body in self.loop_headers.values() if block in body)

    def max_loop_depth(self) -> int:
        return max((self.loop_depth(b.id) for b in self.blocks), default=0)

    def loop_nesting(self) -> dict[int, int]:
        """header -> nesting depth of that loop (1 = outermost)."""
        return {h: self.loop_depth(h) for h in self.loop_headers}


def _successors(code: FlatCode, ops_range: tuple[int, int], op: Op) -> list[int]:
    start, end = ops_range
    nxt = end
    if op.kind == "halt":
        return []
    if op.kind == "jump":
        return [op.target]
    if op.kind in ("branch", "loop_test"):
        return [nxt, op.target] if op.target != nxt else [nxt]
    if op.kind == "loop_step":
        return [op.target]
    return [nxt]


def _dominators(nodes: list[int], pred: dict[int, list[int]], roots: set[int]) -> dict[int, set[int]]:
    dom = {n: set(nodes) for n in nodes}
    for r in roots:
        dom[r] = {r}
    changed = True
    while changed:
        changed = False
        for n in nodes:
            if n in roots:
                continue
            ps = [dom[p] for p in pred[n]]
            new = set.intersection(*ps) if ps else set()
            new = new | {n}
            if new != dom[n]:
                dom[n] = new
                changed = True
    return dom


def build_cfg(kernel: KernelProgram) -> CFG:
    code = lower(kernel)
    ops = code.ops
    leaders = {0}
    for i, op in enumerate(ops):
        if op.target is not None:
            leaders.add(op.target)
        if op.is_terminator or op.kind == "loop_init":
            leaders.add(i + 1)
        if op.kind == "loop_test":
            leaders.add(i)
    leaders = sorted(x for x in leaders if x < len(ops))
    blocks = []
    for bid, start in enumerate(leaders):
        end = leaders[bid + 1] if bid + 1 < len(leaders) else len(ops)
        blocks.append(BasicBlock(bid, start, end, ops[start:end]))
    start_to_id = {b.start: b.id for b in blocks}
    succ = {}
    for b in blocks:
        targets = _successors(code, (b.start, b.end), b.terminator)
        succ[b.id] = [start_to_id[t] for t in targets if t < len(ops)]
    pred = {b.id: [] for b in blocks}
    for b, ss in succ.items():
        for s in ss:
            pred[s].append(b)

    reachable, stack = set(), [0]
    while stack:
        n = stack.pop()
        if n in reachable:
            continue
        reachable.add(n)
        stack.extend(succ[n])
    diags = [f"unreachable block {b.id} (ops {b.start}..{b.end - 1})"
             for b in blocks if b.id not in reachable]

    nodes = [b.id for b in blocks if b.id in reachable]
    rpred = {n: [p for p in pred[n] if p in reachable] for n in nodes}
    dom = _dominators(nodes, rpred, {0})
    exits = [n for n in nodes if not succ[n]]
    rsucc = {n: [s for s in succ[n] if s in reachable] for n in nodes}
    if len(exits) == 1:
        postdom = _dominators(nodes, rsucc, set(exits))
    else:
        # a virtual sink joins multiple halts; no real block post-dominates them all
        postdom = _postdom_virtual(nodes, rsucc, exits)

    back_edges = [(u, h) for u in nodes for h in rsucc[u] if h in dom[u]]
    loop_headers: dict[int, set[int]] = {}
    for u, h in back_edges:
        body = {h, u}
        work = [u]
        while work:
            n = work.pop()
            for p in rpred[n]:
                if p not in body:
                    body.add(p)
                    work.append(p)
        loop_headers.setdefault(h, set()).update(body)
    return CFG(blocks, succ, pred, 0, exits, dom, postdom, back_edges, loop_headers,
               reachable, diags, code)


def _postdom_virtual(nodes, rsucc, exits) -> dict[int, set[int]]:
    sink = -1
    all_nodes = nodes + [sink]
    succ = {n: list(rsucc[n]) for n in nodes}
    for e in exits:
        succ[e].append(sink)
    succ[sink] = []
    pd = _dominators(all_nodes, succ, {sink})
    return {n: pd[n] - {sink} for n in nodes}


def exit_block(kernel: KernelProgram) -> int:
    """Block holding the final halt: the insertion site for epoch persist code."""
    cfg = build_cfg(kernel)
    last = len(cfg.code.ops) - 1
    return cfg.block_of(last)


def has_early_return(kernel: KernelProgram) -> bool:
    return any(isinstance(s, Simple) and s.op == "return" for s in walk(kernel.body))


def ensure_postdominant_exit(kernel: KernelProgram) -> tuple[KernelProgram, int]:
    """Return a kernel whose exit block post-dominates every block, plus its id.

    Straight-through kernels already end in such a block. Kernels with early
    ``return`` statements get an (empty) ``@exit`` section that every return
    path is routed through.
    """
    if has_early_return(kernel) and kernel.exit is None:
        kernel = KernelProgram(kernel.name, kernel.params, kernel.shared, kernel.body, (),
                               kernel.directive, line=kernel.line)
    return kernel, exit_block(kernel)
