"""Line-oriented front end for the kernel language (grammar in docs/lang.md)."""

from __future__ import annotations

import re

from gpupm.lang.ir import (
    BUILTINS, OPTIONS, SIMPLE_OPS, Alloc, Assign, Atomic, BinOp, Call, Clwb, Const,
    Consume, DeviceDecl, Expr, Flag, For, HostOp, HostScript, If, KernelProgram,
    LangError, Launch, Load, MemcpyD2D, Mech, Model, Neg, Param, PersistencyDirective,
    Program, Scope, SetFlag, SharedDecl, Simple, Stmt, Store, Var, expr_vars, stmt_def,
    stmt_uses, walk,
)

_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z_0-9]*)|(<=|>=|==|!=|<<|>>|[-+*/%<>&|^(),]))")
_NAME = r"[A-Za-z_][A-Za-z_0-9]*"

# binary operator precedence, loosest first
_LEVELS = [("|",), ("^",), ("&",), ("==", "!="), ("<", "<=", ">", ">="), ("<<", ">>"),
           ("+", "-"), ("*", "/", "%")]


class _ExprParser:
    def __init__(self, text: str, line: int, col: int):
        self.text = text
        self.line = line
        self.col = col
        self.toks: list[tuple[str, str, int]] = []
        pos = 0
        stripped = text.rstrip()
        while pos < len(stripped):
            m = _TOKEN.match(stripped, pos)
            if not m or m.end() == pos:
                raise LangError(f"unexpected character {stripped[pos:].strip()[:1]!r}", line, col + pos)
            if m.group(1):
                self.toks.append(("int", m.group(1), col + m.start(1)))
            elif m.group(2):
                self.toks.append(("name", m.group(2), col + m.start(2)))
            else:
                self.toks.append(("op", m.group(3), col + m.start(3)))
            pos = m.end()
        self.i = 0

    def peek(self) -> str | None:
        return self.toks[self.i][1] if self.i < len(self.toks) else None

    def take(self, expect: str | None = None) -> tuple[str, str, int]:
        if self.i >= len(self.toks):
            raise LangError(f"unexpected end of expression {self.text.strip()!r}", self.line, self.col)
        tok = self.toks[self.i]
        if expect is not None and tok[1] != expect:
            raise LangError(f"expected {expect!r}, found {tok[1]!r}", self.line, tok[2])
        self.i += 1
        return tok

    def parse(self) -> Expr:
        if not self.toks:
            raise LangError("empty expression", self.line, self.col)
        e = self.binary(0)
        if self.i != len(self.toks):
            raise LangError(f"unexpected token {self.toks[self.i][1]!r}", self.line, self.toks[self.i][2])
        return e

    def binary(self, level: int) -> Expr:
        if level == len(_LEVELS):
            return self.unary()
        left = self.binary(level + 1)
        while self.peek() in _LEVELS[level]:
            op = self.take()[1]
            left = BinOp(op, left, self.binary(level + 1))
        return left

    def unary(self) -> Expr:
        if self.peek() == "-":
            self.take()
            if self.i < len(self.toks) and self.toks[self.i][0] == "int":
                return Const(-int(self.take()[1]))
            return Neg(self.unary())
        return self.atom()

    def atom(self) -> Expr:
        kind, val, col = self.take()
        if kind == "int":
            return Const(int(val))
        if kind == "name":
            if val in ("min", "max") and self.peek() == "(":
                self.take("(")
                a = self.binary(0)
                self.take(",")
                b = self.binary(0)
                self.take(")")
                return Call(val, a, b)
            return Var(val)
        if val == "(":
            e = self.binary(0)
            self.take(")")
            return e
        raise LangError(f"unexpected token {val!r}", self.line, col)


def parse_expr(text: str, line: int = 0, col: int = 1) -> Expr:
    return _ExprParser(text, line, col).parse()


def split_top(text: str, sep: str = ",") -> list[str]:
    """Split on separators not nested inside parentheses."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return parts


def parse_pragma(text: str, line: int) -> PersistencyDirective:
    words = text.split()
    if words[:2] != ["#pragma", "gpu_pm"] or len(words) < 3:
        raise LangError("malformed pragma, expected '#pragma gpu_pm <model> ...'", line, 1)
    try:
        model = Model(words[2])
    except ValueError:
        raise LangError(f"unknown persistency model {words[2]!r}", line, 1) from None
    rest = words[3:]
    scope = None
    if model is Model.EPOCH:
        if not rest:
            raise LangError("epoch pragma needs a scope (kernel, cta or loop)", line, 1)
        try:
            scope = Scope(rest[0])
        except ValueError:
            raise LangError(f"unknown epoch scope {rest[0]!r}", line, 1) from None
        rest = rest[1:]
    for opt in rest:
        if opt not in OPTIONS:
            raise LangError(f"unknown pragma option {opt!r}", line, 1)
    mechs = [o for o in rest if o in ("wt", "clwb", "l2wb")]
    if len(mechs) > 1:
        raise LangError(f"conflicting persist mechanisms {mechs}", line, 1)
    if mechs:
        mech = Mech(mechs[0])
    elif scope in (Scope.KERNEL, Scope.LOOP):
        mech = Mech.L2WB
    else:
        mech = Mech.CLWB
    return PersistencyDirective(model, scope, mech, durable_wpq="pct" not in rest,
                                tx="tx" in rest, idem="idem" in rest, line=line)


def _strip_comment(raw: str) -> str:
    cut = raw.find("//")
    return raw if cut < 0 else raw[:cut]


class _Parser:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.i = 0
        self.devices: list[DeviceDecl] = []
        self.kernels: list[KernelProgram] = []
        self.host_steps: list = []
        self.directives: list[PersistencyDirective] = []
        self.device_names = set(re.findall(rf"^\s*device\s+({_NAME})", text, re.M))
        self.kernel_arrays: dict[str, str] = {}

    # -- line access
    def next_line(self) -> tuple[int, str] | None:
        while self.i < len(self.lines):
            lineno = self.i + 1
            raw = self.lines[self.i]
            self.i += 1
            body = _strip_comment(raw).strip()
            if body:
                return lineno, body
        return None

    def peek_line(self) -> tuple[int, str] | None:
        save = self.i
        nxt = self.next_line()
        self.i = save
        return nxt

    def expr(self, text: str, lineno: int) -> Expr:
        return parse_expr(text, lineno, 1)

    # -- top level
    def parse(self) -> Program:
        host_seen = False
        while True:
            nxt = self.next_line()
            if nxt is None:
                break
            lineno, body = nxt
            pragma = None
            if body.startswith("#pragma"):
                pragma = parse_pragma(body, lineno)
                self.directives.append(pragma)
                anchor = self.peek_line()
                if anchor is None or not anchor[1].startswith("kernel "):
                    raise LangError("pragma with no valid anchor (expected a kernel, loop or launch)", lineno, 1)
                if pragma.scope not in (None, Scope.CTA):
                    raise LangError(f"'{pragma.scope.value}' pragma cannot anchor to a kernel definition", lineno, 1)
                lineno, body = self.next_line()
            if body.startswith("device "):
                self.devices.append(self.device_decl(body, lineno))
            elif body.startswith("kernel "):
                self.kernels.append(self.kernel(body, lineno, pragma))
            elif body.startswith("host"):
                if host_seen:
                    raise LangError("only one host block is allowed", lineno, 1)
                host_seen = True
                self.host(body, lineno)
            else:
                raise LangError(f"unexpected top-level line {body!r}", lineno, 1)
        prog = Program(tuple(self.devices), tuple(self.kernels), HostScript(tuple(self.host_steps)))
        validate_program(prog)
        return prog

    def device_decl(self, body: str, lineno: int) -> DeviceDecl:
        m = re.fullmatch(rf"device\s+({_NAME})\s*\[(.+)\](?:\s+fill\s+(-?\d+))?", body)
        if not m:
            raise LangError("malformed device declaration", lineno, 1)
        return DeviceDecl(m.group(1), self.expr(m.group(2), lineno), int(m.group(3) or 0))

    # -- kernels
    def kernel(self, body: str, lineno: int, pragma) -> KernelProgram:
        one_line = re.fullmatch(rf"(kernel\s+{_NAME}\s*\(.*\)\s*\{{)\s*\}}", body)
        if one_line:
            body = one_line.group(1)
            self.lines.insert(self.i, "}")
        m = re.fullmatch(rf"kernel\s+({_NAME})\s*\((.*)\)\s*\{{", body)
        if not m:
            raise LangError("malformed kernel header, expected 'kernel name(params) {'", lineno, 1)
        params = []
        if m.group(2).strip():
            for p in m.group(2).split(","):
                pm = re.fullmatch(rf"\s*(global|scalar)\s+({_NAME})\s*", p)
                if not pm:
                    raise LangError(f"malformed parameter {p.strip()!r}", lineno, 1)
                params.append(Param(pm.group(2), pm.group(1)))
        self.kernel_arrays = {p.name: "global" for p in params if p.space == "global"}
        for d in self.device_names:
            self.kernel_arrays.setdefault(d, "global")
        self.shared: list[SharedDecl] = []
        stmts, closer = self.block(lineno, top=True)
        exit_body = None
        if closer == "@exit":
            exit_body, closer = self.block(lineno)
            nxt = self.next_line()
            if nxt is None or nxt[1] != "}":
                raise LangError("the @exit section must be the last item of a kernel", lineno, 1)
        if not stmts and exit_body is None:
            stmts = ()
        return KernelProgram(m.group(1), tuple(params), tuple(self.shared), tuple(stmts),
                             None if exit_body is None else tuple(exit_body), pragma, line=lineno)

    def block(self, open_line: int, top: bool = False) -> tuple[list[Stmt], str]:
        """Parse statements up to the closing brace; returns (stmts, closer)."""
        stmts: list[Stmt] = []
        while True:
            nxt = self.next_line()
            if nxt is None:
                raise LangError("unterminated block", open_line, 1)
            lineno, body = nxt
            if body == "}":
                return stmts, "}"
            if body == "} else {":
                return stmts, "else"
            if body == "@exit {":
                if not top:
                    raise LangError("@exit is only allowed at kernel top level", lineno, 1)
                return stmts, "@exit"
            pragma = None
            if body.startswith("#pragma"):
                pragma = parse_pragma(body, lineno)
                self.directives.append(pragma)
                anchor = self.peek_line()
                if anchor is None or not anchor[1].startswith("for "):
                    raise LangError("pragma with no valid anchor (expected a loop)", lineno, 1)
                if pragma.scope is not Scope.LOOP:
                    raise LangError("only 'epoch loop' pragmas can anchor to a loop", lineno, 1)
                lineno, body = self.next_line()
            if body.startswith("shared "):
                if not top:
                    raise LangError("shared arrays must be declared at kernel top level", lineno, 1)
                m = re.fullmatch(rf"shared\s+({_NAME})\s*\[\s*(\d+)\s*\]", body)
                if not m:
                    raise LangError("malformed shared declaration", lineno, 1)
                self.shared.append(SharedDecl(m.group(1), int(m.group(2))))
                self.kernel_arrays[m.group(1)] = "shared"
                continue
            stmts.append(self.statement(body, lineno, pragma))

    def array_ref(self, text: str, lineno: int) -> tuple[str, Expr, str]:
        m = re.fullmatch(rf"\s*({_NAME})\s*\[(.*)\]\s*", text)
        if not m:
            raise LangError(f"expected an array reference, found {text.strip()!r}", lineno, 1)
        name = m.group(1)
        if name not in self.kernel_arrays:
            raise LangError(f"undeclared array {name!r}", lineno, 1)
        return name, self.expr(m.group(2), lineno), self.kernel_arrays[name]

    def statement(self, body: str, lineno: int, pragma) -> Stmt:
        if body.startswith("for "):
            m = re.fullmatch(rf"for\s+({_NAME})\s*=\s*(.+)\{{", body)
            if not m:
                raise LangError("malformed loop header, expected 'for i = lo, hi, step {'", lineno, 1)
            bounds = split_top(m.group(2))
            if len(bounds) != 3:
                raise LangError("loop header needs lo, hi and step", lineno, 1)
            inner, closer = self.block(lineno)
            if closer != "}":
                raise LangError("'else' without 'if'", lineno, 1)
            lo, hi, step = (self.expr(b, lineno) for b in bounds)
            return For(m.group(1), lo, hi, step, tuple(inner), pragma, line=lineno)
        if pragma is not None:
            raise LangError("pragma with no valid anchor", lineno, 1)
        if body.startswith("if "):
            if not body.endswith("{"):
                raise LangError("malformed if, expected 'if cond {'", lineno, 1)
            cond = self.expr(body[3:-1], lineno)
            then, closer = self.block(lineno)
            orelse: list[Stmt] = []
            if closer == "else":
                orelse, closer = self.block(lineno)
                if closer != "}":
                    raise LangError("dangling else", lineno, 1)
            return If(cond, tuple(then), tuple(orelse), line=lineno)
        if body in SIMPLE_OPS:
            return Simple(body, line=lineno)
        if body.startswith("st.wt "):
            ref, val = self.two_operands(body[6:], lineno)
            name, idx, space = self.array_ref(ref, lineno)
            if space != "global":
                raise LangError("st.wt targets global memory only", lineno, 1)
            return Store(name, idx, self.expr(val, lineno), "global", True, line=lineno)
        m = re.match(r"atomic\.(add|min|max)\s+(.*)", body)
        if m:
            ref, val = self.two_operands(m.group(2), lineno)
            name, idx, space = self.array_ref(ref, lineno)
            if space != "global":
                raise LangError("atomics target global memory only", lineno, 1)
            return Atomic(m.group(1), name, idx, self.expr(val, lineno), line=lineno)
        if body.startswith("clwb "):
            name, idx, space = self.array_ref(body[5:], lineno)
            if space != "global":
                raise LangError("clwb takes one global address", lineno, 1)
            return Clwb(name, idx, line=lineno)
        if "=" not in body:
            raise LangError(f"unrecognised statement {body!r}", lineno, 1)
        lhs, rhs = self.assignment_sides(body, lineno)
        if "[" in lhs:
            name, idx, space = self.array_ref(lhs, lineno)
            return Store(name, idx, self.expr(rhs, lineno), space, line=lineno)
        dst = lhs.strip()
        if not re.fullmatch(_NAME, dst):
            raise LangError(f"bad assignment target {dst!r}", lineno, 1)
        if dst in BUILTINS:
            raise LangError(f"{dst!r} is a read-only register", lineno, 1)
        if "[" in rhs:
            name, idx, space = self.array_ref(rhs, lineno)
            return Load(dst, name, idx, space, line=lineno)
        return Assign(dst, self.expr(rhs, lineno), line=lineno)

    @staticmethod
    def assignment_sides(body: str, lineno: int) -> tuple[str, str]:
        # first '=' that is not part of a comparison operator
        for k, ch in enumerate(body):
            if ch == "=" and body[k - 1:k] not in ("<", ">", "!", "=") and body[k + 1:k + 2] != "=":
                return body[:k], body[k + 1:]
        raise LangError(f"unrecognised statement {body!r}", lineno, 1)

    @staticmethod
    def two_operands(text: str, lineno: int) -> tuple[str, str]:
        close = text.rfind("]")
        rest = text[close + 1:].strip()
        if close < 0 or not rest.startswith(","):
            raise LangError("expected 'array[index], value'", lineno, 1)
        return text[:close + 1], rest[1:]

    # -- host
    def host(self, body: str, lineno: int) -> None:
        if body != "host {":
            raise LangError("malformed host block, expected 'host {'", lineno, 1)
        while True:
            nxt = self.next_line()
            if nxt is None:
                raise LangError("unterminated host block", lineno, 1)
            ln, text = nxt
            if text == "}":
                return
            pragma = None
            if text.startswith("#pragma"):
                pragma = parse_pragma(text, ln)
                self.directives.append(pragma)
                anchor = self.peek_line()
                if anchor is None or not anchor[1].startswith("launch "):
                    raise LangError("pragma with no valid anchor (expected a launch)", ln, 1)
                if pragma.scope is not Scope.KERNEL:
                    raise LangError("only 'epoch kernel' pragmas can anchor to a launch", ln, 1)
                ln, text = self.next_line()
            self.host_steps.append(self.host_step(text, ln, pragma))

    def host_step(self, text: str, ln: int, pragma):
        words = text.split()
        if text.startswith("launch "):
            m = re.fullmatch(rf"launch\s+({_NAME})\s*(?:<<<\s*(\d+)\s*,\s*(\d+)\s*>>>)?\s*\((.*)\)", text)
            if not m:
                raise LangError("malformed launch, expected 'launch k(args)'", ln, 1)
            args: list[str | int] = []
            for a in (x.strip() for x in m.group(4).split(",")):
                if not a:
                    continue
                args.append(int(a) if re.fullmatch(r"-?\d+", a) else a)
            grid = (int(m.group(2)), int(m.group(3))) if m.group(2) else None
            return Launch(m.group(1), tuple(args), grid, pragma, line=ln)
        if words[0] == "alloc" and len(words) == 3 and words[2].isdigit():
            return Alloc(words[1], int(words[2]), line=ln)
        if words[0] == "memcpy":
            parts = [p.strip() for p in text[len("memcpy"):].split(",")]
            if len(parts) != 4:
                raise LangError("memcpy takes dst, src, start, count", ln, 1)
            return MemcpyD2D(parts[0], parts[1], int(parts[2]), int(parts[3]), line=ln)
        m = re.fullmatch(rf"flag\s+({_NAME})\s*=\s*(\w+)", text)
        if m:
            try:
                return SetFlag(m.group(1), Flag.from_label(m.group(2)), line=ln)
            except ValueError as err:
                raise LangError(str(err), ln, 1) from None
        if text in ("sync", "l2wb", "pcommit"):
            return HostOp(text, line=ln)
        if words[0] == "consume" and len(words) == 2:
            return Consume(words[1], line=ln)
        raise LangError(f"unrecognised host step {text!r}", ln, 1)


def _check_kernel(k: KernelProgram, devices: set[str]) -> None:
    known = set(BUILTINS) | k.scalar_names()
    arrays = k.global_names() | k.shared_names() | devices
    clash = known & arrays
    if clash:
        raise LangError(f"name used as both array and register: {sorted(clash)}", k.line)

    def visit(stmts, defined: set[str]) -> set[str]:
        for s in stmts:
            missing = stmt_uses(s) - defined
            if missing:
                raise LangError(f"use of undefined register(s) {sorted(missing)}", s.line)
            if isinstance(s, For):
                inner = visit(s.body, defined | {s.var})
                defined = defined | inner | {s.var}
            elif isinstance(s, If):
                defined = defined | visit(s.then, set(defined)) | visit(s.orelse, set(defined))
            else:
                d = stmt_def(s)
                if d is not None:
                    if d in arrays or d in set(BUILTINS) | k.scalar_names():
                        raise LangError(f"cannot assign to {d!r}", s.line)
                    defined = defined | {d}
        return defined

    after_body = visit(k.body, set(known))
    if k.exit is not None:
        visit(k.exit, after_body)
    for s in walk(k.exit or ()):
        if isinstance(s, Simple) and s.op == "return":
            raise LangError("return inside the @exit section", s.line)


def validate_program(prog: Program) -> None:
    devices = prog.device_names()
    names = [k.name for k in prog.kernels]
    if len(set(names)) != len(names):
        raise LangError("duplicate kernel names")
    for d in prog.devices:
        extra = expr_vars(d.size) - {"griddim", "ctadim"}
        if extra:
            raise LangError(f"device size of {d.name!r} may only use griddim/ctadim")
    for k in prog.kernels:
        _check_kernel(k, devices)
    allocated = set(prog.host_arrays()) | devices
    for step in prog.host.steps:
        if isinstance(step, Launch):
            if step.kernel not in names:
                raise LangError(f"launch of undefined kernel {step.kernel!r}", step.line)
            k = prog.kernel(step.kernel)
            if len(step.args) != len(k.params):
                raise LangError(f"kernel {k.name!r} expects {len(k.params)} arguments", step.line)
            bound = []
            for p, a in zip(k.params, step.args):
                if p.space == "global":
                    if not isinstance(a, str) or a not in allocated:
                        raise LangError(f"argument {a!r} for {p.name!r} is not an allocated array", step.line)
                    bound.append(a)
                elif not isinstance(a, int):
                    raise LangError(f"scalar parameter {p.name!r} needs an integer literal", step.line)
            if len(set(bound)) != len(bound):
                raise LangError("the same array is bound to two parameters", step.line)
        elif isinstance(step, MemcpyD2D):
            for a in (step.dst, step.src):
                if a not in allocated:
                    raise LangError(f"memcpy of unallocated array {a!r}", step.line)
        elif isinstance(step, Consume) and step.array not in allocated:
            raise LangError(f"consume of unallocated array {step.array!r}", step.line)


def parse(text: str) -> Program:
    return _Parser(text).parse()


def parse_program(text: str) -> tuple[list[KernelProgram], HostScript, list[PersistencyDirective]]:
    """Parse a source unit into its kernels, host script and bound pragmas."""
    p = _Parser(text)
    prog = p.parse()
    return list(prog.kernels), prog.host, p.directives
