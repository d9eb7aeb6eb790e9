"""Structural and SSA well-formedness checks. Violations are returned, not raised."""
from __future__ import annotations

from dataclasses import dataclass

from hotforge.ir.cfg import CfgInfo, IrreducibleCFG
from hotforge.ir.model import IrFunction, IrModule


@dataclass(frozen=True)
class Violation:
    function: str
    message: str
    value: str | None = None

    def __str__(self) -> str:
        return f"{self.function}: {self.message}"


class ValidationError(Exception):
    def __init__(self, violations: list[Violation]):
        super().__init__("; ".join(map(str, violations)))
        self.violations = violations


def validate(m: IrModule) -> list[Violation]:
    out: list[Violation] = []
    names = [f.name for f in m.functions] + list(m.externs)
    for n in sorted({n for n in names if names.count(n) > 1}):
        out.append(Violation(n, f"duplicate function {n!r}"))
    callable_ = set(names)
    for f in m.functions:
        out.extend(validate_function(f, callable_))
    return out


def check(m: IrModule) -> IrModule:
    """Raise ``ValidationError`` unless ``m`` is valid; return ``m`` for chaining."""
    problems = validate(m)
    if problems:
        raise ValidationError(problems)
    return m


def validate_function(f: IrFunction, callable_: set[str] | None = None) -> list[Violation]:
    out: list[Violation] = []

    def bad(msg, value=None):
        out.append(Violation(f.name, msg, value))

    if not f.blocks:
        bad("function has no blocks")
        return out
    labels = [b.label for b in f.blocks]
    for lab in sorted({x for x in labels if labels.count(x) > 1}):
        bad(f"duplicate label {lab!r}")
    label_set = set(labels)

    defined: dict[str, tuple[str, int]] = {}
    for p, _ in f.params:
        if p in defined:
            bad(f"value %{p} assigned more than once", p)
        defined[p] = (f.entry, -1)
    structural_ok = True
    for b in f.blocks:
        if not b.instrs:
            bad(f"block {b.label!r} is empty")
            structural_ok = False
            continue
        for i, ins in enumerate(b.instrs):
            last = i == len(b.instrs) - 1
            if ins.is_terminator != last:
                bad(f"block {b.label!r} must end in exactly one terminator")
                structural_ok = False
            for t in ins.targets:
                if t not in label_set:
                    bad(f"branch to unknown label {t!r}")
                    structural_ok = False
            if ins.op == "trampoline" and ins.dest is not None:
                bad("trampoline must not define a value")
            if ins.op == "call" and callable_ is not None and ins.callee not in callable_:
                bad(f"call to unknown function {ins.callee!r}")
            if ins.dest is not None:
                if ins.dest in defined:
                    bad(f"value %{ins.dest} assigned more than once", ins.dest)
                else:
                    defined[ins.dest] = (b.label, i)
    if not structural_ok:
        return out

    try:
        cfg = CfgInfo(f)
    except IrreducibleCFG as e:
        bad(f"irreducible control flow ({e.edge[0]} -> {e.edge[1]})")
        return out

    types = f.value_types()
    # call results are opaque: extern accessors may return pointers or flags
    for _, _, ins in f.instructions():
        if ins.op == "call" and ins.dest is not None:
            types[ins.dest] = None
    for b in f.blocks:
        if b.label not in cfg.reachable:
            continue
        for i, ins in enumerate(b.instrs):
            for v in ins.uses():
                if v not in defined:
                    bad(f"use of undefined value %{v}", v)
                    continue
                db, di = defined[v]
                ok = di < i if db == b.label else cfg.dominates(db, b.label)
                if not ok:
                    bad(f"use of %{v} in {b.label!r} is not dominated by its definition", v)
            if ins.op == "cond_br" and isinstance(ins.args[0], str):
                if types.get(ins.args[0], "i1") not in ("i1", None):
                    bad(f"cond_br condition %{ins.args[0]} must be i1", ins.args[0])
            if ins.op in ("load", "store", "getfield"):
                ptr = ins.args[1] if ins.op == "store" else ins.args[0]
                if not isinstance(ptr, str) or types.get(ptr, "ptr") not in ("ptr", None):
                    bad(f"{ins.op} requires a ptr operand", str(ptr))
    return out
