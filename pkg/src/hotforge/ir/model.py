"""Data model for the textual SSA IR."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

from hotforge.values import BINOPS

TERMINATORS = ("br", "cond_br", "ret")


@dataclass(frozen=True)
class Str:
    """String literal operand (only used for frame accessor keys)."""

    value: str


@dataclass
class Instr:
    op: str
    dest: str | None = None
    type: str | None = None
    args: tuple = ()
    pred: str | None = None
    callee: str | None = None
    targets: tuple[str, ...] = ()
    imm: int | None = None

    @property
    def is_terminator(self) -> bool:
        return self.op in TERMINATORS

    @property
    def is_binop(self) -> bool:
        return self.op in BINOPS

    @property
    def is_pure(self) -> bool:
        return self.op in BINOPS or self.op in ("const", "cmp", "getfield")

    @property
    def result_type(self) -> str | None:
        if self.dest is None:
            return None
        if self.op == "cmp":
            return "i1"
        if self.op == "alloca":
            return "ptr"
        if self.op in ("getfield", "call"):
            return "i64"
        return self.type

    def uses(self) -> list[str]:
        """Value names read by this instruction, in operand order."""
        return [a for a in self.args if isinstance(a, str)]

    def renamed(self, mapping: dict[str, object], labels: dict[str, str] | None = None) -> "Instr":
        args = tuple(mapping.get(a, a) if isinstance(a, str) else a for a in self.args)
        dest = self.dest
        if dest is not None and dest in mapping and isinstance(mapping[dest], str):
            dest = mapping[dest]
        targets = self.targets
        if labels:
            targets = tuple(labels.get(t, t) for t in targets)
        return replace(self, args=args, dest=dest, targets=targets)


@dataclass
class IrBlock:
    label: str
    instrs: list[Instr] = field(default_factory=list)

    @property
    def terminator(self) -> Instr:
        return self.instrs[-1]


@dataclass
class IrFunction:
    name: str
    params: list[tuple[str, str]] = field(default_factory=list)
    blocks: list[IrBlock] = field(default_factory=list)

    @property
    def entry(self) -> str:
        return self.blocks[0].label

    def block(self, label: str) -> IrBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def labels(self) -> list[str]:
        return [b.label for b in self.blocks]

    def instructions(self) -> Iterator[tuple[str, int, Instr]]:
        for b in self.blocks:
            for i, ins in enumerate(b.instrs):
                yield b.label, i, ins

    def value_types(self) -> dict[str, str]:
        types = dict(self.params)
        for _, _, ins in self.instructions():
            if ins.dest is not None:
                types.setdefault(ins.dest, ins.result_type)
        return types

    def definitions(self) -> dict[str, tuple[str, int, Instr]]:
        """Map each instruction-defined value to (block, index, instr)."""
        out = {}
        for label, i, ins in self.instructions():
            if ins.dest is not None:
                out.setdefault(ins.dest, (label, i, ins))
        return out

    def allocas(self) -> dict[str, Instr]:
        return {ins.dest: ins for _, _, ins in self.instructions() if ins.op == "alloca"}

    def instr_count(self) -> int:
        return sum(len(b.instrs) for b in self.blocks)

    def copy(self) -> "IrFunction":
        return IrFunction(
            self.name,
            list(self.params),
            [IrBlock(b.label, [replace(i) for i in b.instrs]) for b in self.blocks],
        )


@dataclass
class IrModule:
    functions: list[IrFunction] = field(default_factory=list)
    name: str = "module"
    externs: list[str] = field(default_factory=list)

    def function(self, name: str) -> IrFunction:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def has_function(self, name: str) -> bool:
        return any(f.name == name for f in self.functions)

    def copy(self) -> "IrModule":
        return IrModule([f.copy() for f in self.functions], self.name, list(self.externs))
