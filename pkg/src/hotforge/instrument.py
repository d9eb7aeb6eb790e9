"""Trampoline insertion at function entrances, after calls, and around complex regions."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator

from hotforge.ir import (
    CfgInfo,
    Instr,
    IrBlock,
    IrFunction,
    IrModule,
    analyze_cfg,
    is_complex,
)
from hotforge.ir.validate import validate_function

SITE_KINDS = ("entrance", "after_call", "loop_header", "loop_exit", "branch_header", "branch_exit")


class InstrumentError(Exception):
    pass


@dataclass(frozen=True)
class TrampolineSite:
    site_id: int
    function: str
    block: str
    index: int  # position of the trampoline instruction in the instrumented block
    kind: str
    dominates_exit: bool

    def to_json(self) -> dict:
        return {
            "id": self.site_id,
            "fn": self.function,
            "block": self.block,
            "index": self.index,
            "kind": self.kind,
            "dominates_exit": self.dominates_exit,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrampolineSite":
        return cls(d["id"], d["fn"], d["block"], d["index"], d["kind"], d["dominates_exit"])


@dataclass
class InstrumentReport:
    sites: list[TrampolineSite] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        counts = dict.fromkeys(SITE_KINDS, 0)
        for s in self.sites:
            counts[s.kind] += 1
        return counts

    def for_function(self, name: str) -> list[TrampolineSite]:
        return [s for s in self.sites if s.function == name]

    def to_json(self) -> dict:
        return {"sites": [s.to_json() for s in self.sites], "counts": self.counts}

    @classmethod
    def from_json(cls, d: dict) -> "InstrumentReport":
        return cls([TrampolineSite.from_json(s) for s in d["sites"]])


def is_instrumented(f: IrFunction) -> bool:
    return any(ins.op == "trampoline" for _, _, ins in f.instructions())


def instrumentation_points(f: IrFunction, cfg: CfgInfo) -> list[tuple[str, int, str]]:
    """(block, original index, kind) triples; a trampoline goes before that index."""
    points: list[tuple[str, int, str]] = []
    entry = f.blocks[0]
    lead = 0
    while lead < len(entry.instrs) and entry.instrs[lead].op == "alloca":
        lead += 1
    points.append((entry.label, lead, "entrance"))
    for b in f.blocks:
        if b.label not in cfg.reachable:
            continue
        for i, ins in enumerate(b.instrs):
            if ins.op == "call":
                points.append((b.label, i + 1, "after_call"))
    for loop in cfg.loops:
        if is_complex(loop, f):
            points.append((loop.header, 0, "loop_header"))
            points.extend((x, 0, "loop_exit") for x in loop.exits)
    for br in cfg.branch_regions:
        if is_complex(br, f):
            points.extend((arm, 0, "branch_header") for arm in br.arms)
            points.extend((x, 0, "branch_exit") for x in br.exits)
    pos = {label: k for k, label in enumerate(f.labels())}
    unique: dict[tuple[str, int], str] = {}
    for block, idx, kind in points:
        unique.setdefault((block, idx), kind)
    return sorted(((b, i, k) for (b, i), k in unique.items()), key=lambda p: (pos[p[0]], p[1]))


def instrument_function(
    f: IrFunction, next_id: Iterator[int] | None = None
) -> tuple[IrFunction, list[TrampolineSite]]:
    if next_id is None:
        next_id = itertools.count()
    if is_instrumented(f):
        raise InstrumentError(f"function {f.name!r} is already instrumented")
    cfg = analyze_cfg(f)
    problems = validate_function(f)
    if problems:
        raise InstrumentError("; ".join(map(str, problems)))
    by_block: dict[str, list[tuple[int, str]]] = {}
    for block, idx, kind in instrumentation_points(f, cfg):
        by_block.setdefault(block, []).append((idx, kind))
    sites: list[TrampolineSite] = []
    blocks = []
    for b in f.blocks:
        pending = by_block.get(b.label, [])
        out: list[Instr] = []
        for j, ins in enumerate(b.instrs):
            for idx, kind in pending:
                if idx == j:
                    sid = next(next_id)
                    sites.append(
                        TrampolineSite(sid, f.name, b.label, len(out), kind, cfg.dominates_exit(b.label))
                    )
                    out.append(Instr("trampoline", imm=sid))
            out.append(ins)
        blocks.append(IrBlock(b.label, out))
    return IrFunction(f.name, list(f.params), blocks), sites


def instrument_module(m: IrModule) -> tuple[IrModule, InstrumentReport]:
    counter = itertools.count()
    functions, report = [], InstrumentReport()
    for f in m.functions:
        g, sites = instrument_function(f, counter)
        functions.append(g)
        report.sites.extend(sites)
    return IrModule(functions, m.name, list(m.externs)), report


def strip_trampolines(f: IrFunction) -> IrFunction:
    g = f.copy()
    for b in g.blocks:
        b.instrs = [i for i in b.instrs if i.op != "trampoline"]
    return g


def strip_module(m: IrModule) -> IrModule:
    return IrModule([strip_trampolines(f) for f in m.functions], m.name, list(m.externs))


def ensure_instrumented(m: IrModule) -> tuple[IrModule, InstrumentReport]:
    """Instrument ``m``, or recover the site report of an already instrumented module.

    Instrumentation is deterministic, so re-instrumenting the stripped module
    must reproduce ``m`` exactly; anything else means hand-edited trampolines.
    """
    if not any(is_instrumented(f) for f in m.functions):
        return instrument_module(m)
    again, report = instrument_module(strip_module(m))
    if again.functions != m.functions:
        raise InstrumentError("module trampolines do not match a fresh instrumentation")
    return m, report


def trampoline_static_overhead(f_orig: IrFunction, f_inst: IrFunction) -> int:
    """Instructions added by instrumentation; one per trampoline site."""
    if strip_trampolines(f_inst) != f_orig:
        raise InstrumentError(f"mismatched pair for {f_orig.name!r}")
    return f_inst.instr_count() - f_orig.instr_count()

