"""Pretty-printer emitting kernel-language text that reparses to the same IR."""

from __future__ import annotations

from gpupm.lang.ir import (
    Alloc, Assign, Atomic, Call, Clwb, Const, Consume, Expr, For, HostOp,
    HostScript, If, KernelProgram, Launch, Load, MemcpyD2D, Neg, Program, SetFlag,
    Simple, Stmt, Store, Var,
)

_PREC = {"|": 0, "^": 1, "&": 2, "==": 3, "!=": 3, "<": 4, "<=": 4, ">": 4, ">=": 4,
         "<<": 5, ">>": 5, "+": 6, "-": 6, "*": 7, "/": 7, "%": 7}


def format_expr(e: Expr, parent: int = -1, right: bool = False) -> str:
    if isinstance(e, Const):
        text = str(e.value)
        # a negative literal on the right of '-' would otherwise lex as '--'
        return f"({text})" if e.value < 0 and parent >= 0 else text
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.fn}({format_expr(e.left)}, {format_expr(e.right)})"
    if isinstance(e, Neg):
        if isinstance(e.operand, Const):
            return f"-({format_expr(e.operand)})"
        return f"-{format_expr(e.operand, 8)}"
    prec = _PREC[e.op]
    text = f"{format_expr(e.left, prec)} {e.op} {format_expr(e.right, prec, True)}"
    if prec < parent or (right and prec == parent):
        return f"({text})"
    return text


def format_stmt(s: Stmt, indent: int = 1) -> list[str]:
    pad = "  " * indent
    if isinstance(s, Assign):
        return [f"{pad}{s.dst} = {format_expr(s.expr)}"]
    if isinstance(s, Load):
        return [f"{pad}{s.dst} = {s.array}[{format_expr(s.index)}]"]
    if isinstance(s, Store):
        if s.wt:
            return [f"{pad}st.wt {s.array}[{format_expr(s.index)}], {format_expr(s.value)}"]
        return [f"{pad}{s.array}[{format_expr(s.index)}] = {format_expr(s.value)}"]
    if isinstance(s, Atomic):
        return [f"{pad}atomic.{s.op} {s.array}[{format_expr(s.index)}], {format_expr(s.value)}"]
    if isinstance(s, Clwb):
        return [f"{pad}clwb {s.array}[{format_expr(s.index)}]"]
    if isinstance(s, Simple):
        return [f"{pad}{s.op}"]
    if isinstance(s, For):
        out = []
        if s.directive is not None:
            out.append(f"{pad}{s.directive.pragma_text()}")
        out.append(f"{pad}for {s.var} = {format_expr(s.lo)}, {format_expr(s.hi)}, {format_expr(s.step)} {{")
        for inner in s.body:
            out += format_stmt(inner, indent + 1)
        out.append(f"{pad}}}")
        return out
    if isinstance(s, If):
        out = [f"{pad}if {format_expr(s.cond)} {{"]
        for inner in s.then:
            out += format_stmt(inner, indent + 1)
        if s.orelse:
            out.append(f"{pad}}} else {{")
            for inner in s.orelse:
                out += format_stmt(inner, indent + 1)
        out.append(f"{pad}}}")
        return out
    raise TypeError(f"not a statement: {s!r}")


def format_kernel(k: KernelProgram) -> str:
    out = []
    if k.directive is not None:
        out.append(k.directive.pragma_text())
    params = ", ".join(f"{p.space} {p.name}" for p in k.params)
    out.append(f"kernel {k.name}({params}) {{")
    for d in k.shared:
        out.append(f"  shared {d.name}[{d.size}]")
    for s in k.body:
        out += format_stmt(s)
    if k.exit is not None:
        out.append("@exit {")
        for s in k.exit:
            out += format_stmt(s)
    out.append("}")
    return "\n".join(out) + "\n"


def format_host_step(s) -> str:
    if isinstance(s, Alloc):
        return f"alloc {s.array} {s.size}"
    if isinstance(s, MemcpyD2D):
        return f"memcpy {s.dst}, {s.src}, {s.start}, {s.count}"
    if isinstance(s, SetFlag):
        return f"flag {s.flag} = {s.value.label}"
    if isinstance(s, Launch):
        grid = f"<<<{s.grid[0]}, {s.grid[1]}>>>" if s.grid else ""
        return f"launch {s.kernel}{grid}({', '.join(str(a) for a in s.args)})"
    if isinstance(s, HostOp):
        return s.op
    if isinstance(s, Consume):
        return f"consume {s.array}"
    raise TypeError(f"not a host step: {s!r}")


def format_host(h: HostScript) -> str:
    out = ["host {"]
    for s in h.steps:
        if isinstance(s, Launch) and s.directive is not None:
            out.append(f"  {s.directive.pragma_text()}")
        out.append(f"  {format_host_step(s)}")
    out.append("}")
    return "\n".join(out) + "\n"


def format_program(p: Program) -> str:
    parts = []
    for d in p.devices:
        fill = f" fill {d.fill}" if d.fill else ""
        parts.append(f"device {d.name}[{format_expr(d.size)}]{fill}\n")
    for k in p.kernels:
        parts.append(format_kernel(k))
    if p.host.steps:
        parts.append(format_host(p.host))
    return "\n".join(parts)
