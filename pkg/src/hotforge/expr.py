"""Symbolic patch expressions used to present and check backward substitution."""
from __future__ import annotations

from dataclasses import dataclass

from hotforge.values import Ptr, binop, compare

SYMBOLS = {
    "add": "+", "sub": "-", "mul": "*", "shl": "<<", "shr": ">>", "or": "|", "and": "&", "xor": "^",
    "eq": "==", "ne": "!=", "lt": "<", "le": "<=", "gt": ">", "ge": ">=", "ult": "<u", "ule": "<=u",
}
TIGHT = {"shl", "shr", "or", "and", "xor"}
ASSOCIATIVE = {"or", "and", "xor", "add", "mul"}


class Expr:
    def free_vars(self) -> list[str]:
        out: list[str] = []
        self._collect(out, Var)
        return list(dict.fromkeys(out))

    def cells(self) -> list[str]:
        out: list[str] = []
        self._collect(out, Load)
        return list(dict.fromkeys(out))

    def _collect(self, out, kind):
        for c in self.children():
            c._collect(out, kind)

    def children(self) -> tuple:
        return ()

    def substitute(self, var: str, repl: "Expr", cell: bool = False) -> "Expr":
        return self

    def __str__(self) -> str:
        return render(self)


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def _collect(self, out, kind):
        if kind is Var:
            out.append(self.name)

    def substitute(self, var, repl, cell=False):
        return repl if not cell and self.name == var else self


@dataclass(frozen=True)
class Lit(Expr):
    value: int


@dataclass(frozen=True)
class Const(Expr):
    """A named constant folded from a ``const`` definition."""

    value: int
    type: str
    origin: str = ""


@dataclass(frozen=True)
class Load(Expr):
    ptr: Expr

    def children(self):
        return (self.ptr,)

    def _collect(self, out, kind):
        if kind is Load and isinstance(self.ptr, Var):
            out.append(self.ptr.name)
        self.ptr._collect(out, kind)

    def substitute(self, var, repl, cell=False):
        if cell and self.ptr == Var(var):
            return repl
        return Load(self.ptr.substitute(var, repl, cell))


@dataclass(frozen=True)
class Field(Expr):
    base: Expr
    index: int
    origin: str = ""

    def children(self):
        return (self.base,)

    def substitute(self, var, repl, cell=False):
        return Field(self.base.substitute(var, repl, cell), self.index, self.origin)


@dataclass(frozen=True)
class Bin(Expr):
    op: str
    type: str
    a: Expr
    b: Expr

    def children(self):
        return (self.a, self.b)

    def substitute(self, var, repl, cell=False):
        return Bin(self.op, self.type, self.a.substitute(var, repl, cell), self.b.substitute(var, repl, cell))


@dataclass(frozen=True)
class Cmp(Expr):
    pred: str
    type: str
    a: Expr
    b: Expr

    def children(self):
        return (self.a, self.b)

    def substitute(self, var, repl, cell=False):
        return Cmp(self.pred, self.type, self.a.substitute(var, repl, cell), self.b.substitute(var, repl, cell))


def _flatten(e: Expr, op: str) -> list[Expr]:
    if isinstance(e, Bin) and e.op == op:
        return _flatten(e.a, op) + _flatten(e.b, op)
    return [e]


def _render(e: Expr, top: bool) -> str:
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Lit):
        return str(e.value)
    if isinstance(e, Const):
        return e.origin or str(e.value)
    if isinstance(e, Load):
        return f"*{_render(e.ptr, False)}"
    if isinstance(e, Field):
        return e.origin or f"{_render(e.base, False)}[{e.index}]"
    if isinstance(e, Bin):
        parts = _flatten(e, e.op) if e.op in ASSOCIATIVE else [e.a, e.b]
        sep = SYMBOLS[e.op] if e.op in TIGHT else f" {SYMBOLS[e.op]} "
        text = sep.join(_render(p, False) for p in parts)
        return text if top else f"({text})"
    if isinstance(e, Cmp):
        text = f"{_render(e.a, False)} {SYMBOLS[e.pred]} {_render(e.b, False)}"
        return text if top else f"({text})"
    raise TypeError(f"not an expression: {e!r}")


def render(e: Expr) -> str:
    """Canonical infix text; associative chains are flattened, outermost parens dropped."""
    return _render(e, True)


def evaluate(e: Expr, values: dict, memory) -> object:
    if isinstance(e, Var):
        return values[e.name]
    if isinstance(e, (Lit, Const)):
        return e.value
    if isinstance(e, Load):
        return memory.read(evaluate(e.ptr, values, memory))
    if isinstance(e, Field):
        base = evaluate(e.base, values, memory)
        return memory.read(Ptr(base.region, base.offset + e.index))
    if isinstance(e, Bin):
        return binop(e.op, e.type, evaluate(e.a, values, memory), evaluate(e.b, values, memory))
    if isinstance(e, Cmp):
        return compare(e.pred, e.type, evaluate(e.a, values, memory), evaluate(e.b, values, memory))
    raise TypeError(f"not an expression: {e!r}")


def to_json(e: Expr) -> object:
    if isinstance(e, Var):
        return {"var": e.name}
    if isinstance(e, Lit):
        return e.value
    if isinstance(e, Const):
        return {"const": e.value, "type": e.type, "name": e.origin}
    if isinstance(e, Load):
        return {"load": to_json(e.ptr)}
    if isinstance(e, Field):
        return {"field": to_json(e.base), "index": e.index, "name": e.origin}
    if isinstance(e, Bin):
        return {"op": e.op, "type": e.type, "args": [to_json(e.a), to_json(e.b)]}
    return {"cmp": e.pred, "type": e.type, "args": [to_json(e.a), to_json(e.b)]}
