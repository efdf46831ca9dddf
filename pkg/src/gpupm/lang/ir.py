"""Structured IR for the mini SIMT kernel language and its host scripts.

Kernel bodies are kept as statement trees (``For``/``If`` nest other
statements). Basic blocks, the CFG and dominance information are derived
from the tree by :mod:`gpupm.lang.cfg`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Union

BUILTINS = ("tid", "ctaid", "ctadim", "griddim")


class LangError(Exception):
    """Parse or validation failure, carrying a source position when known."""

    def __init__(self, msg: str, line: int | None = None, col: int | None = None):
        self.msg = msg
        self.line = line
        self.col = col
        where = f"{line}:{col}: " if line is not None else ""
        super().__init__(where + msg)


# ---------------------------------------------------------------- expressions


@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str  # min | max
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


Expr = Union[Const, Var, BinOp, Call, Neg]


def expr_vars(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Const):
        return set()
    if isinstance(e, Neg):
        return expr_vars(e.operand)
    return expr_vars(e.left) | expr_vars(e.right)


def subst_expr(e: Expr, mapping: dict[str, Expr]) -> Expr:
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Const):
        return e
    if isinstance(e, Neg):
        return Neg(subst_expr(e.operand, mapping))
    if isinstance(e, BinOp):
        return BinOp(e.op, subst_expr(e.left, mapping), subst_expr(e.right, mapping))
    return Call(e.fn, subst_expr(e.left, mapping), subst_expr(e.right, mapping))


# ---------------------------------------------------------------- statements
#
# `line` is a source position kept for diagnostics only; it never takes part
# in equality so that printed-and-reparsed IR compares equal.


@dataclass(frozen=True)
class Assign:
    dst: str
    expr: Expr
    line: int = field(default=0, compare=False)

    @property
    def opcode(self) -> str:
        return "arith"


@dataclass(frozen=True)
class Load:
    dst: str
    array: str
    index: Expr
    space: str = "global"
    line: int = field(default=0, compare=False)

    @property
    def opcode(self) -> str:
        return f"ld.{self.space}"


@dataclass(frozen=True)
class Store:
    array: str
    index: Expr
    value: Expr
    space: str = "global"
    wt: bool = False
    line: int = field(default=0, compare=False)

    @property
    def opcode(self) -> str:
        return "st.wt" if self.wt else f"st.{self.space}"


@dataclass(frozen=True)
class Atomic:
    op: str  # add | min | max
    array: str
    index: Expr
    value: Expr
    line: int = field(default=0, compare=False)

    @property
    def opcode(self) -> str:
        return "atomic.global"


@dataclass(frozen=True)
class Clwb:
    array: str
    index: Expr
    line: int = field(default=0, compare=False)

    @property
    def opcode(self) -> str:
        return "clwb"


SIMPLE_OPS = ("l2wb", "sfence", "pcommit", "syncthreads", "return")


@dataclass(frozen=True)
class Simple:
    op: str
    line: int = field(default=0, compare=False)

    @property
    def opcode(self) -> str:
        return "halt" if self.op == "return" else self.op


@dataclass(frozen=True)
class For:
    var: str
    lo: Expr
    hi: Expr
    step: Expr
    body: tuple["Stmt", ...]
    directive: "PersistencyDirective | None" = None
    line: int = field(default=0, compare=False)

    @property
    def opcode(self) -> str:
        return "branch"


@dataclass(frozen=True)
class If:
    cond: Expr
    then: tuple["Stmt", ...]
    orelse: tuple["Stmt", ...] = ()
    line: int = field(default=0, compare=False)

    @property
    def opcode(self) -> str:
        return "branch"


Stmt = Union[Assign, Load, Store, Atomic, Clwb, Simple, For, If]
MEMORY_STMTS = (Load, Store, Atomic, Clwb)


def walk(stmts: tuple[Stmt, ...] | list[Stmt]) -> Iterator[Stmt]:
    """Pre-order traversal of a statement tree."""
    for s in stmts:
        yield s
        if isinstance(s, For):
            yield from walk(s.body)
        elif isinstance(s, If):
            yield from walk(s.then)
            yield from walk(s.orelse)


def walk_with_context(stmts, ctx=()) -> Iterator[tuple[Stmt, tuple[Stmt, ...]]]:
    """Pre-order traversal yielding each statement with its enclosing chain.

    Chain entries are ``For`` nodes or ``(If, taken_branch)`` pairs.
    """
    for s in stmts:
        yield s, ctx
        if isinstance(s, For):
            yield from walk_with_context(s.body, ctx + (s,))
        elif isinstance(s, If):
            yield from walk_with_context(s.then, ctx + ((s, True),))
            yield from walk_with_context(s.orelse, ctx + ((s, False),))


def stmt_uses(s: Stmt) -> set[str]:
    """Registers read by the statement itself (not by nested bodies)."""
    if isinstance(s, Assign):
        return expr_vars(s.expr)
    if isinstance(s, Load):
        return expr_vars(s.index)
    if isinstance(s, (Store, Atomic)):
        return expr_vars(s.index) | expr_vars(s.value)
    if isinstance(s, Clwb):
        return expr_vars(s.index)
    if isinstance(s, For):
        return expr_vars(s.lo) | expr_vars(s.hi) | expr_vars(s.step)
    if isinstance(s, If):
        return expr_vars(s.cond)
    return set()


def stmt_def(s: Stmt) -> str | None:
    if isinstance(s, (Assign, Load)):
        return s.dst
    if isinstance(s, For):
        return s.var
    return None


# ---------------------------------------------------------------- directives


class Model(str, Enum):
    STRICT = "strict"
    EPOCH = "epoch"


class Scope(str, Enum):
    KERNEL = "kernel"
    CTA = "cta"
    LOOP = "loop"


class Mech(str, Enum):
    WT = "wt"
    CLWB = "clwb"
    L2WB = "l2wb"


OPTIONS = ("wt", "clwb", "l2wb", "pct", "tx", "idem")


@dataclass(frozen=True)
class PersistencyDirective:
    """One ``#pragma gpu_pm`` line.

    ``pct`` in the pragma means the WPQs are volatile and pcommit must be
    emitted, so ``durable_wpq`` is its negation.
    """

    model: Model
    scope: Scope | None
    mech: Mech
    durable_wpq: bool = True
    tx: bool = False
    idem: bool = False
    line: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.model is Model.STRICT:
            if self.scope is not None:
                raise LangError("strict persistency takes no epoch scope", self.line)
            if self.mech not in (Mech.WT, Mech.CLWB):
                raise LangError("strict persistency supports only wt or clwb", self.line)
            if self.tx:
                raise LangError("durable transactions need an epoch scope", self.line)
        elif self.scope is None:
            raise LangError("epoch persistency needs a scope", self.line)
        elif self.scope is Scope.KERNEL and self.mech is not Mech.L2WB:
            raise LangError("kernel-level epochs persist with l2wb only", self.line)

    @property
    def label(self) -> str:
        """Short name in the evaluation's naming style, e.g. ``Undo_C_wt_pct``."""
        if self.model is Model.STRICT:
            name = f"SP_{self.mech.value}"
        else:
            letter = {"kernel": "K", "cta": "C", "loop": "L"}[self.scope.value]
            name = f"{'Undo' if self.tx else 'EP'}_{letter}"
            if self.scope is not Scope.KERNEL:
                name += f"_{self.mech.value}"
            if self.tx and self.idem:
                name += "_idem"
        if not self.durable_wpq:
            name += "_pct"
        return name

    def pragma_text(self) -> str:
        parts = ["#pragma gpu_pm", self.model.value]
        if self.scope is not None:
            parts.append(self.scope.value)
        parts.append(self.mech.value)
        if not self.durable_wpq:
            parts.append("pct")
        if self.tx:
            parts.append("tx")
        if self.idem:
            parts.append("idem")
        return " ".join(parts)


def directive(text: str) -> PersistencyDirective:
    """Build a directive from pragma option words, e.g. ``"epoch cta clwb pct"``."""
    from gpupm.lang.parser import parse_pragma

    body = text.strip()
    if not body.startswith("#pragma"):
        body = "#pragma gpu_pm " + body
    return parse_pragma(body, 0)


def parse_label(label: str) -> PersistencyDirective | None:
    """Inverse of ``PersistencyDirective.label``; ``baseline`` gives None.

    Accepts e.g. ``SP_wt``, ``EP_K_pct``, ``EP_C_clwb``, ``Undo_L_l2wb_idem_pct``.
    """
    if label.lower() == "baseline":
        return None
    parts = label.split("_")
    pct = parts[-1] == "pct"
    if pct:
        parts.pop()
    idem = parts[-1] == "idem"
    if idem:
        parts.pop()
    head = parts[0]
    try:
        if head == "SP" and len(parts) == 2 and not idem:
            return PersistencyDirective(Model.STRICT, None, Mech(parts[1]), not pct)
        if head in ("EP", "Undo") and parts[1] in ("K", "C", "L"):
            scope = {"K": Scope.KERNEL, "C": Scope.CTA, "L": Scope.LOOP}[parts[1]]
            if scope is Scope.KERNEL and len(parts) == 2:
                mech = Mech.L2WB
            elif len(parts) == 3:
                mech = Mech(parts[2])
            else:
                raise ValueError
            tx = head == "Undo"
            if idem and not tx:
                raise ValueError
            return PersistencyDirective(Model.EPOCH, scope, mech, not pct, tx, idem)
    except (ValueError, IndexError, LangError):
        pass
    raise LangError(f"unknown directive label {label!r}")


# ---------------------------------------------------------------- programs


@dataclass(frozen=True)
class Param:
    name: str
    space: str  # global | scalar


@dataclass(frozen=True)
class SharedDecl:
    name: str
    size: int


@dataclass(frozen=True)
class DeviceDecl:
    """Module-level global array, sized by an expression over ``griddim``/``ctadim``."""

    name: str
    size: Expr
    fill: int = 0


@dataclass(frozen=True)
class KernelProgram:
    name: str
    params: tuple[Param, ...]
    shared: tuple[SharedDecl, ...]
    body: tuple[Stmt, ...]
    exit: tuple[Stmt, ...] | None = None
    directive: PersistencyDirective | None = None
    line: int = field(default=0, compare=False)

    def global_names(self) -> set[str]:
        return {p.name for p in self.params if p.space == "global"}

    def scalar_names(self) -> set[str]:
        return {p.name for p in self.params if p.space == "scalar"}

    def shared_names(self) -> set[str]:
        return {d.name for d in self.shared}

    def all_stmts(self) -> Iterator[Stmt]:
        yield from walk(self.body)
        if self.exit is not None:
            yield from walk(self.exit)

    def global_stores(self) -> list[Store | Atomic]:
        return [s for s in self.all_stmts()
                if isinstance(s, (Store, Atomic)) and getattr(s, "space", "global") == "global"]

    def has_atomics(self) -> bool:
        return any(isinstance(s, Atomic) for s in self.all_stmts())

    def loops(self) -> list[For]:
        return [s for s in self.all_stmts() if isinstance(s, For)]

    def opcodes(self) -> list[str]:
        return [s.opcode for s in self.all_stmts()]


# ---------------------------------------------------------------- host side


class Flag(int, Enum):
    INITIAL = 0
    IN_TX = 1
    COMPLETE = 2

    @property
    def label(self) -> str:
        return {0: "Initial", 1: "InTx", 2: "Complete"}[self.value]

    @classmethod
    def from_label(cls, text: str) -> "Flag":
        for f in cls:
            if f.label == text:
                return f
        raise ValueError(f"unknown flag value {text!r}")


@dataclass(frozen=True)
class Alloc:
    array: str
    size: int
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class MemcpyD2D:
    dst: str
    src: str
    start: int
    count: int
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SetFlag:
    flag: str
    value: Flag
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Launch:
    kernel: str
    args: tuple[str | int, ...]
    grid: tuple[int, int] | None = None
    directive: PersistencyDirective | None = None
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class HostOp:
    op: str  # sync | l2wb | pcommit
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Consume:
    array: str
    line: int = field(default=0, compare=False)


HostStep = Union[Alloc, MemcpyD2D, SetFlag, Launch, HostOp, Consume]


@dataclass(frozen=True)
class HostScript:
    steps: tuple[HostStep, ...] = ()

    def launches(self) -> list[Launch]:
        return [s for s in self.steps if isinstance(s, Launch)]


@dataclass(frozen=True)
class Program:
    """A whole program unit: device arrays, kernels and the host driver."""

    devices: tuple[DeviceDecl, ...]
    kernels: tuple[KernelProgram, ...]
    host: HostScript

    def kernel(self, name: str) -> KernelProgram:
        for k in self.kernels:
            if k.name == name:
                return k
        raise KeyError(name)

    def replace_kernel(self, new: KernelProgram) -> "Program":
        ks = tuple(new if k.name == new.name else k for k in self.kernels)
        return Program(self.devices, ks, self.host)

    def with_devices(self, extra: list[DeviceDecl]) -> "Program":
        have = {d.name for d in self.devices}
        devs = self.devices + tuple(d for d in extra if d.name not in have)
        return Program(devs, self.kernels, self.host)

    def device_names(self) -> set[str]:
        return {d.name for d in self.devices}

    def host_arrays(self) -> dict[str, int]:
        return {s.array: s.size for s in self.host.steps if isinstance(s, Alloc)}


@dataclass(frozen=True)
class GridConfig:
    grid_dim: int
    cta_dim: int
    warp_size: int = 4

    def __post_init__(self):
        if self.grid_dim <= 0 or self.cta_dim <= 0 or self.warp_size <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.cta_dim % self.warp_size:
            raise ValueError("ctaDim must be a multiple of warpSize")

    @property
    def warps_per_cta(self) -> int:
        return self.cta_dim // self.warp_size

    @classmethod
    def parse(cls, text: str, warp_size: int = 4) -> "GridConfig":
        """``"2x8"`` -> 2 CTAs of 8 threads."""
        g, c = text.lower().split("x")
        return cls(int(g), int(c), warp_size)
