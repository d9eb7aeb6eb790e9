"""Hotpatch and dispatcher-action types shared by analysis, runtime and bundles."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from hotforge.ir import IrFunction, IrModule, print_function

FRAME_ACCESSORS = ("frame_get", "frame_set")


class Op(enum.IntEnum):
    PASS = 0
    DROP = 1
    REDIRECT = 2


@dataclass(frozen=True)
class PatchAction:
    op: Op
    ret_code: int = 0
    target: str | None = None

    def __post_init__(self):
        if (self.target is not None) != (self.op is Op.REDIRECT):
            raise ValueError("target must be given iff op is REDIRECT")

    def to_json(self) -> dict:
        return {"op": self.op.name, "ret_code": self.ret_code, "target": self.target}


PASS = PatchAction(Op.PASS)


@dataclass(frozen=True)
class ActionSpec:
    """What the official patch does on its taken path."""

    op: Op
    ret_code: int = 0
    target: str | None = None

    @classmethod
    def parse(cls, text: str) -> "ActionSpec":
        kind, _, arg = text.partition(":")
        if kind == "drop":
            return cls(Op.DROP, int(arg or 0))
        if kind == "redirect" and arg:
            return cls(Op.REDIRECT, 0, arg)
        raise ValueError(f"bad action {text!r}; expected drop:CODE or redirect:LABEL")

    def __str__(self) -> str:
        return f"drop:{self.ret_code}" if self.op is Op.DROP else f"redirect:{self.target}"


@dataclass
class Hotpatch:
    name: str
    body: IrFunction
    target_fn: str
    site_id: int
    required_vars: list[str]
    action: ActionSpec
    target_index: int | None = None  # block index of a REDIRECT target in target_fn
    cve_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def action_encoding(self) -> dict:
        return {
            "op": self.action.op.name,
            "op_code": int(self.action.op),
            "ret_code": self.action.ret_code,
            "target": self.action.target,
            "target_index": self.target_index,
        }

    def module(self) -> IrModule:
        return IrModule([self.body], self.name, list(FRAME_ACCESSORS))

    def ir_text(self) -> str:
        return "".join(f"extern {e}\n" for e in FRAME_ACCESSORS) + "\n" + print_function(self.body)

    def instruction_count(self) -> int:
        return self.body.instr_count()
