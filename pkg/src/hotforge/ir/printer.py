"""Canonical printer. Output is deterministic and re-parses to an equal module."""
from __future__ import annotations

import json

from hotforge.ir.model import Instr, IrFunction, IrModule, Str


def format_operand(a) -> str:
    if isinstance(a, Str):
        return json.dumps(a.value)
    if isinstance(a, int):
        return str(a)
    return "%" + a


def format_instr(ins: Instr) -> str:
    op = ins.op
    args = [format_operand(a) for a in ins.args]
    if op == "store":
        return f"store {args[0]}, {args[1]}"
    if op == "trampoline":
        return f"trampoline {ins.imm}"
    if op == "ret":
        return "ret" + (f" {args[0]}" if args else "")
    if op == "br":
        return f"br {ins.targets[0]}"
    if op == "cond_br":
        return f"cond_br {args[0]}, {ins.targets[0]}, {ins.targets[1]}"
    if op == "call":
        text = f"call {ins.callee}({', '.join(args)})"
    elif op == "const":
        text = f"const {ins.type} {ins.imm}"
    elif op == "cmp":
        text = f"cmp {ins.pred} {ins.type} {args[0]}, {args[1]}"
    elif op == "alloca":
        text = f"alloca {ins.type}"
    elif op == "load":
        text = f"load {ins.type} {args[0]}"
    elif op == "getfield":
        text = f"getfield {args[0]}, {ins.imm}"
    else:
        text = f"{op} {ins.type} {args[0]}, {args[1]}"
    return f"%{ins.dest} = {text}" if ins.dest is not None else text


def print_function(f: IrFunction) -> str:
    params = ", ".join(f"%{n}: {t}" for n, t in f.params)
    lines = [f"fn {f.name}({params}) {{"]
    for b in f.blocks:
        lines.append(f"{b.label}:")
        lines.extend("  " + format_instr(i) for i in b.instrs)
    lines.append("}")
    return "\n".join(lines) + "\n"


def print_module(m: IrModule) -> str:
    parts = []
    if m.externs:
        parts.append("".join(f"extern {e}\n" for e in m.externs))
    parts.extend(print_function(f) for f in m.functions)
    return "\n".join(parts)
