"""Hoisting an official patch to the best trampoline and emitting the hotpatch.

The pipeline for one patched function:

1. ``extract_fragments`` cuts every patch fragment out of the patched
   function and checks that what is left is exactly the vulnerable function.
2. ``classify_scenario`` looks at the innermost region around the patch.
3. ``find_best_trampoline`` picks the closest admissible site.
4. ``backward_substitute`` walks from the patch back to that site, keeping
   only the instructions the patch condition depends on.
5. ``emit_hotpatch`` turns the kept slice into a frame-taking function.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from hotforge.expr import Bin, Cmp, Const, Expr, Field, Lit, Load, Var, render, to_json
from hotforge.hotpatch import ActionSpec, Hotpatch, Op
from hotforge.instrument import TrampolineSite, strip_trampolines
from hotforge.ir import (
    BranchRegion,
    CfgInfo,
    Instr,
    IrBlock,
    IrFunction,
    LoopInfo,
    Str,
    analyze_cfg,
    format_instr,
    is_complex,
)
from hotforge.ir.validate import validate_function

FRAME = "hp.frame"
TAKE, PASS_LABEL = "hp.take", "hp.pass"


class AnalysisError(Exception):
    kind = "analysis error"

    def __init__(self, detail: str = ""):
        super().__init__(f"{self.kind}: {detail}" if detail else self.kind)
        self.detail = detail


class UnsupportedPatchClass(AnalysisError):
    kind = "unsupported patch class"


class UnsupportedPatchShape(AnalysisError):
    kind = "unsupported patch shape"


class NoReachableTrampoline(AnalysisError):
    kind = "no reachable trampoline"


class UnsupportedDef(AnalysisError):
    kind = "unsupported def"


class NotLiveAtTrampoline(AnalysisError):
    kind = "variable not live at trampoline"


# inputs


@dataclass(frozen=True)
class PatchSpec:
    function: str
    block: str
    first: int
    last: int
    action: ActionSpec
    cve_id: str = ""

    @staticmethod
    def parse_range(text: str) -> tuple[str, int, int]:
        """``BLOCK:I..BLOCK:J`` (or ``BLOCK:I``) to (block, I, J)."""
        lo, _, hi = text.partition("..")
        try:
            b1, i = lo.rsplit(":", 1)
            b2, j = hi.rsplit(":", 1) if hi else (b1, i)
            first, last = int(i), int(j)
        except ValueError:
            raise ValueError(f"bad patch range {text!r}; expected BLOCK:IDX..BLOCK:IDX") from None
        if b1 != b2:
            raise UnsupportedPatchShape(f"patch range {text!r} spans blocks {b1!r} and {b2!r}")
        return b1, first, last

    @classmethod
    def from_text(cls, function: str, range_text: str, action: str, cve_id: str = "") -> "PatchSpec":
        block, first, last = cls.parse_range(range_text)
        return cls(function, block, first, last, ActionSpec.parse(action), cve_id)

    @property
    def range_text(self) -> str:
        return f"{self.block}:{self.first}..{self.block}:{self.last}"


@dataclass
class Fragment:
    spec: PatchSpec
    instrs: list[Instr]  # the patch range, ending in its cond_br
    taken: str
    cont: str
    point: tuple[str, int]  # where the fragment sits in the vulnerable function

    @property
    def guard(self) -> Instr:
        return self.instrs[-1]

    @property
    def body(self) -> list[Instr]:
        return self.instrs[:-1]


class ScenarioTag(str, enum.Enum):
    OUTSIDE = "1"
    INSIDE_COMPLEX = "2_1"
    INSIDE_SIMPLE = "2_2"


@dataclass
class Scenario:
    tag: ScenarioTag
    region: LoopInfo | BranchRegion | None = None

    @property
    def label(self) -> str:
        return {"1": "Outside(1)", "2_1": "InsideComplex(2_1)", "2_2": "InsideSimple(2_2)"}[self.tag.value]


@dataclass
class Step:
    kind: str  # "var", "cell", "shadow", "guard" or "region"
    instr: str
    var: str | None = None
    expr: Expr | None = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "instr": self.instr,
            "var": self.var,
            "expr": None if self.expr is None else render(self.expr),
        }


@dataclass
class SubstitutionTrace:
    initial: list[Expr] = field(default_factory=list)
    steps: list[Step] = field(default_factory=list)
    skipped: int = 0

    def replay(self) -> list[Expr]:
        exprs = list(self.initial)
        for s in self.steps:
            if s.kind == "var":
                exprs = [e.substitute(s.var, s.expr) for e in exprs]
            elif s.kind == "cell":
                exprs = [e.substitute(s.var, s.expr, cell=True) for e in exprs]
            elif s.kind == "guard":
                exprs.append(s.expr)
        return exprs

    def to_json(self) -> dict:
        return {
            "initial": [render(e) for e in self.initial],
            "steps": [s.to_json() for s in self.steps],
            "skipped": self.skipped,
            "final": [render(e) for e in self.replay()],
        }


# fragment extraction


def _fragment_shape(f: IrFunction, spec: PatchSpec, preds: dict[str, list[str]]) -> tuple[str, str]:
    if spec.block not in f.labels():
        raise UnsupportedPatchShape(f"no block {spec.block!r} in {f.name}")
    instrs = f.block(spec.block).instrs
    if not (0 <= spec.first <= spec.last == len(instrs) - 1):
        raise UnsupportedPatchShape(
            f"patch range {spec.range_text} must end at the terminator of {spec.block!r}"
        )
    guard = instrs[-1]
    if guard.op != "cond_br" or guard.targets[0] == guard.targets[1]:
        raise UnsupportedPatchShape(f"patch range {spec.range_text} must end in a two-way cond_br")
    taken, cont = guard.targets
    for lab in (taken, cont):
        if preds[lab] != [spec.block] or lab == f.entry:
            raise UnsupportedPatchShape(f"patch arm {lab!r} must be reached only from {spec.block!r}")
    for ins in instrs[spec.first : -1]:
        if ins.op in ("store", "call", "alloca", "trampoline") or ins.is_terminator:
            raise UnsupportedPatchClass(f"patch instruction '{format_instr(ins)}' changes program state")
    arm = f.block(taken).instrs
    term = arm[0]
    if len(arm) != 1:
        raise UnsupportedPatchShape(f"taken arm {taken!r} must be a single ret or br")
    if spec.action.op is Op.DROP:
        ok = term.op == "ret" and (
            (not term.args and spec.action.ret_code == 0)
            or (term.args and isinstance(term.args[0], int) and term.args[0] == spec.action.ret_code)
        )
    else:
        ok = term.op == "br" and term.targets[0] == spec.action.target
    if not ok:
        raise UnsupportedPatchShape(
            f"taken arm '{format_instr(term)}' does not match action {spec.action}"
        )
    return taken, cont


def extract_fragments(f_patched: IrFunction, specs: list[PatchSpec]) -> tuple[IrFunction, list[Fragment]]:
    """Excise every fragment; returns the remaining function and the fragments."""
    preds: dict[str, list[str]] = {lab: [] for lab in f_patched.labels()}
    for b in f_patched.blocks:
        for t in dict.fromkeys(b.terminator.targets):
            preds[t].append(b.label)
    by_block: dict[str, tuple[PatchSpec, str, str]] = {}
    for spec in specs:
        if spec.block in by_block:
            raise UnsupportedPatchShape(f"two patch ranges end in block {spec.block!r}")
        taken, cont = _fragment_shape(f_patched, spec, preds)
        by_block[spec.block] = (spec, taken, cont)
    removed = {lab for _, t, c in by_block.values() for lab in (t, c)}
    points: dict[str, tuple[str, int]] = {}

    def expand(label: str, root: str, offset: int) -> list[Instr]:
        instrs = f_patched.block(label).instrs
        if label not in by_block:
            return list(instrs)
        spec, _, cont = by_block[label]
        points[label] = (root, offset + spec.first)
        return instrs[: spec.first] + expand(cont, root, offset + spec.first)

    blocks = [
        IrBlock(b.label, expand(b.label, b.label, 0)) for b in f_patched.blocks if b.label not in removed
    ]
    frags = []
    for label, (spec, taken, cont) in by_block.items():
        b = f_patched.block(label)
        frags.append(Fragment(spec, b.instrs[spec.first :], taken, cont, points[label]))
    frags.sort(key=lambda fr: specs.index(fr.spec))
    return IrFunction(f_patched.name, list(f_patched.params), blocks), frags


def check_patch_class(f_vuln: IrFunction, f_patched: IrFunction, specs: list[PatchSpec]) -> list[Fragment]:
    """Fragments of a supported patch; raises for anything beyond inserted guards."""
    excised, frags = extract_fragments(f_patched, specs)
    base = strip_trampolines(f_vuln)
    if excised != base:
        raise UnsupportedPatchClass(
            f"{f_patched.name} differs from the vulnerable function outside the patch ranges"
        )
    known = {p for p, _ in base.params} | set(base.definitions())
    for fr in frags:
        local = set()
        for ins in fr.instrs:
            for v in ins.uses():
                if v not in known and v not in local:
                    raise UnsupportedPatchClass(f"patch refers to unknown variable %{v}")
            if ins.dest is not None:
                local.add(ins.dest)
        if fr.spec.action.op is Op.REDIRECT and fr.spec.action.target not in base.labels():
            raise UnsupportedPatchClass(f"redirect target {fr.spec.action.target!r} is not in {base.name}")
    return frags


def instrumented_point(f_inst: IrFunction, point: tuple[str, int]) -> tuple[str, int]:
    """Map an index of the uninstrumented block to the instrumented one."""
    block, idx = point
    seen = 0
    for k, ins in enumerate(f_inst.block(block).instrs):
        if ins.op == "trampoline":
            continue
        if seen == idx:
            return block, k
        seen += 1
    return block, len(f_inst.block(block).instrs)


# scenario and site selection


def classify_scenario(f: IrFunction, block: str, cfg: CfgInfo | None = None) -> Scenario:
    cfg = cfg or analyze_cfg(f)
    region = cfg.innermost_region(block)
    if region is None:
        return Scenario(ScenarioTag.OUTSIDE)
    if is_complex(region, f):
        return Scenario(ScenarioTag.INSIDE_COMPLEX, region)
    return Scenario(ScenarioTag.INSIDE_SIMPLE, region)


def unit_target(f_inst: IrFunction, scenario: Scenario, point: tuple[str, int]) -> tuple[str, int]:
    """The program point the hotpatch must stand in for."""
    r = scenario.region
    if scenario.tag is not ScenarioTag.INSIDE_SIMPLE:
        return point
    if isinstance(r, BranchRegion):
        return r.header, len(f_inst.block(r.header).instrs) - 1
    return r.header, 0


def _precedes(site: TrampolineSite, target: tuple[str, int], cfg: CfgInfo) -> bool:
    tb, ti = target
    if site.block == tb:
        return site.index < ti
    return cfg.strictly_dominates(site.block, tb)


def trampoline_distance(f: IrFunction, site: TrampolineSite, target: tuple[str, int], cfg: CfgInfo) -> int:
    """Instructions strictly between ``site`` and ``target`` along the dominator path."""
    tb, ti = target
    if site.block == tb:
        return ti - site.index - 1
    path = cfg.dom_path(site.block, tb)
    n = len(f.block(site.block).instrs) - site.index - 1
    n += sum(len(f.block(b).instrs) for b in path[1:-1])
    return n + ti


def find_best_trampoline(
    f_inst: IrFunction,
    target: tuple[str, int],
    scenario: Scenario,
    sites: list[TrampolineSite],
    cfg: CfgInfo | None = None,
) -> TrampolineSite:
    cfg = cfg or analyze_cfg(f_inst)
    tb = target[0]
    own = [s for s in sites if s.function == f_inst.name]
    if scenario.tag is ScenarioTag.INSIDE_COMPLEX:
        cands = [s for s in own if s.block == tb and s.index < target[1]]
    else:
        unit = scenario.region.body if scenario.tag is ScenarioTag.INSIDE_SIMPLE else frozenset()
        cands = [
            s
            for s in own
            if s.dominates_exit
            and _precedes(s, target, cfg)
            and s.block not in unit
            and all(tb in lp.body for lp in cfg.loops_containing(s.block))
        ]
    if not cands:
        raise NoReachableTrampoline(f"no admissible trampoline before {tb}:{target[1]} in {f_inst.name}")
    return min(cands, key=lambda s: (trampoline_distance(f_inst, s, target, cfg), -s.site_id))


# walk between site and target


@dataclass
class _Item:
    kind: str  # "ins", "guard", "branch" or "loop"
    block: str
    instr: Instr | None = None
    region: LoopInfo | BranchRegion | None = None
    next: str | None = None  # on-path successor for guard/branch/loop
    used: bool = False


def walk_items(f: IrFunction, site: TrampolineSite, target: tuple[str, int], cfg: CfgInfo) -> list[_Item]:
    tb, ti = target
    path = cfg.dom_path(site.block, tb)
    items: list[_Item] = []
    k = 0
    start = site.index + 1
    while True:
        block = path[k]
        instrs = f.block(block).instrs
        end = ti if k == len(path) - 1 else len(instrs) - 1
        items.extend(_Item("ins", block, ins) for ins in instrs[start:end] if ins.op != "trampoline")
        if k == len(path) - 1:
            return items
        nxt = path[k + 1]
        term = instrs[-1]
        if term.op == "cond_br":
            region = next(
                (r for r in cfg.branch_regions if r.header == block and r.exits == [nxt]), None
            )
            if region is not None:
                items.append(_Item("branch", block, term, region, nxt))
            elif nxt in term.targets:
                items.append(_Item("guard", block, term, next=nxt))
            else:
                raise UnsupportedPatchShape(f"cannot follow {block} -> {nxt} on the way to the patch")
        elif term.op != "br" or term.targets[0] != nxt:
            raise UnsupportedPatchShape(f"cannot follow {block} -> {nxt} on the way to the patch")
        k += 1
        loop = next(
            (lp for lp in cfg.loops if lp.header == path[k] and path[k] != tb and tb not in lp.body), None
        )
        if loop is not None:
            while path[k] in loop.body:
                k += 1
            if path[k] not in loop.exits:
                raise UnsupportedPatchShape(f"loop at {loop.header} is not left through {path[k]}")
            items.append(_Item("loop", loop.header, region=loop, next=path[k]))
        start = 0


# backward pass


def _operand(a) -> Expr:
    return Var(a) if isinstance(a, str) else Lit(a.value if isinstance(a, Str) else a)


def instr_expr(ins: Instr) -> Expr:
    a = [_operand(x) for x in ins.args]
    if ins.op == "const":
        return Const(ins.imm, ins.type, ins.dest)
    if ins.is_binop:
        return Bin(ins.op, ins.type, a[0], a[1])
    if ins.op == "cmp":
        return Cmp(ins.pred, ins.type, a[0], a[1])
    if ins.op == "getfield":
        return Field(a[0], ins.imm, ins.dest)
    if ins.op == "load":
        return Load(a[0])
    raise UnsupportedDef(f"'{format_instr(ins)}' has no expression form")


def patch_expression(frag: Fragment) -> Expr:
    """The fragment's guard condition with every in-range definition inlined."""
    defs = {ins.dest: ins for ins in frag.body if ins.dest is not None}

    def build(a) -> Expr:
        if isinstance(a, str) and a in defs:
            e = instr_expr(defs[a])
            for v in list(e.free_vars()):
                if v in defs:
                    e = e.substitute(v, build(v))
            return e
        return _operand(a)

    return build(frag.guard.args[0])


@dataclass
class _State:
    needed: set[str]
    cells: set[str]
    shadow: set[str]
    allocas: dict[str, Instr]
    trace: SubstitutionTrace

    def is_cell(self, p) -> bool:
        return isinstance(p, str) and p in self.allocas

    def need_uses(self, ins: Instr) -> None:
        if ins.op == "load" and self.is_cell(ins.args[0]):
            self.cells.add(ins.args[0])
        elif ins.op == "store" and self.is_cell(ins.args[1]):
            if isinstance(ins.args[0], str):
                self.needed.add(ins.args[0])
        else:
            self.needed.update(ins.uses())


def _absorb(state: _State, blocks: list[IrBlock], what: str) -> None:
    """Add a whole code region to the slice."""
    defined = {ins.dest for b in blocks for ins in b.instrs if ins.dest is not None}
    for b in blocks:
        for ins in b.instrs:
            if ins.op == "call":
                raise UnsupportedDef(f"{what} contains a call")
            if ins.op == "alloca":
                raise UnsupportedDef(f"{what} allocates stack cells")
            if ins.op == "store":
                if not state.is_cell(ins.args[1]):
                    raise UnsupportedDef(f"{what} stores to program memory")
                state.shadow.add(ins.args[1])
    state.needed -= defined
    for b in blocks:
        for ins in b.instrs:
            if ins.op == "trampoline":
                continue
            state.need_uses(ins)
    state.needed -= defined


def _region_blocks(f: IrFunction, region, with_header: bool = False) -> list[IrBlock]:
    labels = region.body | ({region.header} if with_header else set())
    return [strip_block(f.block(lab)) for lab in f.labels() if lab in labels]


def strip_block(b: IrBlock) -> IrBlock:
    return IrBlock(b.label, [i for i in b.instrs if i.op != "trampoline"])


def _touches(state: _State, blocks: list[IrBlock]) -> bool:
    for b in blocks:
        for ins in b.instrs:
            if ins.dest is not None and ins.dest in state.needed:
                return True
            if ins.op == "store" and state.is_cell(ins.args[1]) and ins.args[1] in state.cells:
                return True
    return False


def backward_pass(f: IrFunction, items: list[_Item], state: _State) -> None:
    tr = state.trace
    for item in reversed(items):
        ins = item.instr
        if item.kind == "guard":
            c = ins.args[0]
            item.used = True
            if isinstance(c, str):
                state.needed.add(c)
            tr.steps.append(Step("guard", format_instr(ins), None, _operand(c)))
            continue
        if item.kind in ("branch", "loop"):
            blocks = _region_blocks(f, item.region)
            if not _touches(state, blocks):
                tr.skipped += 1
                continue
            item.used = True
            _absorb(state, blocks, f"{item.kind} region at {item.block}")
            if item.kind == "branch" and isinstance(ins.args[0], str):
                state.needed.add(ins.args[0])
            tr.steps.append(Step("region", f"{item.kind} {item.region.header}"))
            continue
        if ins.dest is not None and ins.dest in state.needed:
            if ins.op in ("call", "alloca"):
                raise UnsupportedDef(f"patch variable %{ins.dest} is defined by '{format_instr(ins)}'")
            if ins.op == "add" and ins.type == "ptr" and any(state.is_cell(a) for a in ins.args):
                raise UnsupportedDef(f"patch variable %{ins.dest} points into a stack cell")
            item.used = True
            state.needed.discard(ins.dest)
            state.need_uses(ins)
            tr.steps.append(Step("var", format_instr(ins), ins.dest, instr_expr(ins)))
        elif ins.op == "store":
            ptr = ins.args[1]
            if not state.is_cell(ptr):
                raise UnsupportedPatchShape(
                    f"'{format_instr(ins)}' writes program memory between trampoline and patch"
                )
            if ptr in state.cells:
                item.used = True
                # a cell a region may overwrite has no single reaching store
                kind = "shadow" if ptr in state.shadow else "cell"
                state.cells.discard(ptr)
                state.shadow.add(ptr)
                state.need_uses(ins)
                tr.steps.append(Step(kind, format_instr(ins), ptr, _operand(ins.args[0])))
            else:
                tr.skipped += 1
        elif ins.op == "call":
            raise UnsupportedPatchShape(f"call '{format_instr(ins)}' between trampoline and patch")
        else:
            tr.skipped += 1


def backward_substitute(
    f_inst: IrFunction, frag: Fragment, site: TrampolineSite, cfg: CfgInfo | None = None
) -> tuple[list[Expr], SubstitutionTrace]:
    """Scenario 1 / 2-1 substitution: the patch expression rewritten at ``site``."""
    cfg = cfg or analyze_cfg(f_inst)
    target = instrumented_point(f_inst, frag.point)
    plan = _plan(f_inst, None, frag, site, target, cfg, None)
    return plan.trace.replay(), plan.trace


@dataclass
class _Plan:
    items: list[_Item]
    state: _State
    trace: SubstitutionTrace
    unit_blocks: list[IrBlock]


def _plan(f_inst, f_patched, frag, site, target, cfg, scenario) -> _Plan:
    allocas = f_inst.allocas()
    trace = SubstitutionTrace([patch_expression(frag)])
    state = _State(set(), set(), set(), allocas, trace)
    unit_blocks: list[IrBlock] = []
    if scenario is not None and scenario.tag is ScenarioTag.INSIDE_SIMPLE:
        unit_blocks = _unit_blocks(f_patched, frag, scenario.region)
        _absorb(state, unit_blocks, "patch unit")
        if isinstance(scenario.region, BranchRegion):
            c = f_inst.block(scenario.region.header).terminator.args[0]
            if isinstance(c, str):
                state.needed.add(c)
        trace.steps.append(Step("region", f"unit {scenario.region.header}"))
    else:
        defined = set()
        for ins in frag.instrs:
            for v in ins.uses():
                if v not in defined:
                    if ins.op == "load" and state.is_cell(v):
                        state.cells.add(v)
                    else:
                        state.needed.add(v)
            if ins.dest is not None:
                defined.add(ins.dest)
    items = walk_items(f_inst, site, target, cfg)
    backward_pass(f_inst, items, state)
    return _Plan(items, state, trace, unit_blocks)


def _unit_blocks(f_patched: IrFunction, frag: Fragment, region) -> list[IrBlock]:
    """Blocks of the patched region that can lead to the patch block."""
    block = frag.spec.block
    stops = set(region.exits) | {frag.taken}
    work = list(region.arms) if isinstance(region, BranchRegion) else [region.header]
    labels: set[str] = set()
    while work:
        lab = work.pop()
        if lab in labels or lab in stops:
            continue
        labels.add(lab)
        work.extend(f_patched.block(lab).terminator.targets)
    if block not in labels:
        raise UnsupportedPatchShape(f"patch block {block!r} is not inside the region at {region.header}")
    reach = {block}
    changed = True
    while changed:
        changed = False
        for lab in labels:
            if lab not in reach and any(t in reach for t in f_patched.block(lab).terminator.targets):
                reach.add(lab)
                changed = True
    return [f_patched.block(lab) for lab in f_patched.labels() if lab in reach and lab != frag.taken]


# emission


class _Emitter:
    def __init__(self, name: str, state: _State, consts: dict[str, int]):
        self.name = name
        self.state = state
        self.consts = consts
        self.blocks: list[IrBlock] = []
        self.cur: list[Instr] = []
        self.label = "entry"
        self._n = 0

    def fresh(self) -> str:
        self._n += 1
        return f"hp.b{self._n}"

    def close(self, term: Instr, next_label: str | None = None) -> None:
        self.cur.append(term)
        self.blocks.append(IrBlock(self.label, self.cur))
        self.cur = []
        self.label = next_label

    def args(self, ins: Instr) -> Instr:
        mapping = {v: self.consts[v] for v in ins.uses() if v in self.consts}
        return ins.renamed(mapping) if mapping else ins

    def instr(self, ins: Instr) -> Instr | None:
        st = self.state
        if ins.op in ("trampoline", "const"):
            return None
        if ins.op == "load" and st.is_cell(ins.args[0]):
            cell = ins.args[0]
            if cell in st.shadow:
                return Instr("load", ins.dest, ins.type, (f"sh.{cell}",))
            return Instr("call", ins.dest, args=(FRAME, Str(f"*{cell}")), callee="frame_get")
        if ins.op == "store" and st.is_cell(ins.args[1]):
            return self.args(Instr("store", args=(ins.args[0], f"sh.{ins.args[1]}")))
        return self.args(ins)

    def copy_blocks(self, blocks: list[IrBlock], labels: dict[str, str], default: str) -> None:
        for b in blocks:
            out = []
            for ins in b.instrs:
                if ins.op == "ret":
                    out.append(Instr("br", targets=(PASS_LABEL,)))
                elif ins.is_terminator:
                    tgts = tuple(labels.get(t, default) for t in ins.targets)
                    out.append(self.args(Instr(ins.op, args=ins.args, targets=tgts)))
                else:
                    e = self.instr(ins)
                    if e is not None:
                        out.append(e)
            self.blocks.append(IrBlock(labels[b.label], out))


def _const_values(*functions: IrFunction) -> dict[str, int]:
    out = {}
    for f in functions:
        for _, _, ins in f.instructions():
            if ins.op == "const":
                out[ins.dest] = ins.imm
    return out


def _check_live(f: IrFunction, site: TrampolineSite, names, cfg: CfgInfo) -> None:
    defs = f.definitions()
    params = {p for p, _ in f.params}
    for v in names:
        if v in params:
            continue
        if v not in defs:
            raise NotLiveAtTrampoline(f"%{v} is not defined in {f.name}")
        block, idx, _ = defs[v]
        if not ((block == site.block and idx < site.index) or cfg.strictly_dominates(block, site.block)):
            raise NotLiveAtTrampoline(f"%{v} is not live at trampoline {site.site_id}")


def _check_redirect(f: IrFunction, plan: _Plan, target: str, cfg: CfgInfo) -> None:
    """A redirect skips the code between site and patch, so that code must be inert."""
    skipped = [it.instr for it in plan.items if it.kind == "ins"]
    for it in plan.items:
        if it.kind in ("branch", "loop"):
            skipped += [i for b in _region_blocks(f, it.region) for i in b.instrs]
    skipped += [i for b in plan.unit_blocks for i in b.instrs]
    if any(i.op == "store" for i in skipped):
        raise UnsupportedPatchShape("redirect would skip stores between trampoline and patch")
    defined = {i.dest for i in skipped if i.dest is not None}
    reach, work = set(), [target]
    while work:
        lab = work.pop()
        if lab in reach:
            continue
        reach.add(lab)
        work.extend(cfg.succ[lab])
    for lab in reach:
        for ins in f.block(lab).instrs:
            if defined & set(ins.uses()):
                raise UnsupportedPatchShape(f"redirect target {target!r} uses values defined before the patch")


def _ordered(f: IrFunction, names: set[str]) -> list[str]:
    order = [p for p, _ in f.params] + list(f.definitions())
    rank = {v: i for i, v in enumerate(order)}
    return sorted(names, key=lambda v: (rank.get(v, len(rank)), v))


def emit_hotpatch(
    name: str,
    f_inst: IrFunction,
    f_patched: IrFunction | None,
    frag: Fragment,
    site: TrampolineSite,
    plan: _Plan,
    scenario: Scenario,
    cfg: CfgInfo,
) -> Hotpatch:
    state = plan.state
    consts = _const_values(f_inst, *([f_patched] if f_patched else []))
    free = {v for v in state.needed if v not in consts}
    _check_live(f_inst, site, free | state.cells, cfg)
    required = _ordered(f_inst, free) + [f"*{c}" for c in _ordered(f_inst, state.cells)]
    em = _Emitter(name, state, consts)
    for v in _ordered(f_inst, free):
        em.cur.append(Instr("call", v, args=(FRAME, Str(v)), callee="frame_get"))
    for c in _ordered(f_inst, state.shadow):
        em.cur.append(Instr("alloca", f"sh.{c}", state.allocas[c].type))
        if c in state.cells:
            t = f"sh.{c}.init"
            em.cur.append(Instr("call", t, args=(FRAME, Str(f"*{c}")), callee="frame_get"))
            em.cur.append(Instr("store", args=(t, f"sh.{c}")))
    for it in plan.items:
        if not it.used:
            continue
        if it.kind == "ins":
            e = em.instr(it.instr)
            if e is not None:
                em.cur.append(e)
        elif it.kind == "guard":
            nxt = em.fresh()
            tgts = tuple(nxt if t == it.next else PASS_LABEL for t in it.instr.targets)
            em.close(em.args(Instr("cond_br", args=it.instr.args, targets=tgts)), nxt)
        else:
            nxt = em.fresh()
            blocks = _region_blocks(f_inst, it.region, with_header=it.kind == "loop")
            labels = {b.label: f"c.{b.label}" for b in blocks}
            labels[it.next] = nxt
            if it.kind == "branch":
                tgts = tuple(labels.get(t, PASS_LABEL) for t in it.instr.targets)
                em.close(em.args(Instr("cond_br", args=it.instr.args, targets=tgts)))
            else:
                em.close(Instr("br", targets=(labels[it.region.header],)))
            em.copy_blocks(blocks, labels, PASS_LABEL)
            em.label = nxt
    if scenario.tag is ScenarioTag.INSIDE_SIMPLE:
        region = scenario.region
        labels = {b.label: f"c.{b.label}" for b in plan.unit_blocks}
        labels[frag.taken] = TAKE
        if isinstance(region, BranchRegion):
            term = f_inst.block(region.header).terminator
            tgts = tuple(labels.get(t, PASS_LABEL) for t in term.targets)
            em.close(em.args(Instr("cond_br", args=term.args, targets=tgts)))
        else:
            em.close(Instr("br", targets=(labels[region.header],)))
        em.copy_blocks(plan.unit_blocks, labels, PASS_LABEL)
    else:
        for ins in frag.body:
            e = em.instr(ins)
            if e is not None:
                em.cur.append(e)
        em.close(em.args(Instr("cond_br", args=frag.guard.args, targets=(TAKE, PASS_LABEL))))
    action = frag.spec.action
    target_index = None
    take = []
    if action.op is Op.DROP:
        take.append(Instr("call", args=(FRAME, Str("ret_code"), action.ret_code), callee="frame_set"))
    else:
        target_index = f_inst.labels().index(action.target)
        take.append(Instr("call", args=(FRAME, Str("target"), target_index), callee="frame_set"))
    take.append(Instr("ret", args=(int(action.op),)))
    em.blocks.append(IrBlock(TAKE, take))
    em.blocks.append(IrBlock(PASS_LABEL, [Instr("ret", args=(int(Op.PASS),))]))
    body = IrFunction(name, [(FRAME, "ptr")], em.blocks)
    problems = validate_function(body, {"frame_get", "frame_set"})
    if problems:
        raise AnalysisError("generated hotpatch is invalid: " + "; ".join(map(str, problems)))
    return Hotpatch(
        name,
        body,
        f_inst.name,
        site.site_id,
        required,
        action,
        target_index,
        frag.spec.cve_id,
    )


# drivers


@dataclass
class AnalysisResult:
    hotpatch: Hotpatch
    scenario: Scenario
    site: TrampolineSite
    distance: int
    official: Expr
    exprs: list[Expr]
    trace: SubstitutionTrace
    fragment: Fragment

    def to_json(self) -> dict:
        return {
            "hotpatch": self.hotpatch.name,
            "scenario": self.scenario.label,
            "site": self.site.to_json(),
            "distance": self.distance,
            "official": render(self.official),
            "exprs": [render(e) for e in self.exprs],
            "exprs_tree": [to_json(e) for e in self.exprs],
            "trace": self.trace.to_json(),
        }


def hotpatch_name(cve_id: str, k: int) -> str:
    tag = "".join(c if c.isalnum() else "_" for c in cve_id.lower()) or "patch"
    return f"filter_{tag}_{k}"


def analyze_all(
    f_inst: IrFunction,
    f_patched: IrFunction,
    specs: list[PatchSpec],
    sites: list[TrampolineSite],
) -> list[AnalysisResult]:
    """One hotpatch per fragment of a patched function."""
    if not specs:
        raise UnsupportedPatchShape("no patch ranges given")
    if any(s.function != f_patched.name for s in specs) or f_inst.name != f_patched.name:
        raise UnsupportedPatchShape("all patch ranges must be in the analyzed function")
    frags = check_patch_class(f_inst, f_patched, specs)
    cfg = analyze_cfg(f_inst)
    results = []
    for k, frag in enumerate(frags):
        point = instrumented_point(f_inst, frag.point)
        scenario = classify_scenario(f_inst, point[0], cfg)
        target = unit_target(f_inst, scenario, point)
        site = find_best_trampoline(f_inst, target, scenario, sites, cfg)
        plan = _plan(f_inst, f_patched, frag, site, target, cfg, scenario)
        if frag.spec.action.op is Op.REDIRECT:
            _check_redirect(f_inst, plan, frag.spec.action.target, cfg)
        name = hotpatch_name(frag.spec.cve_id, k)
        hp = emit_hotpatch(name, f_inst, f_patched, frag, site, plan, scenario, cfg)
        hp.meta = {"scenario": scenario.label, "site_kind": site.kind, "patch_range": frag.spec.range_text}
        results.append(
            AnalysisResult(
                hp,
                scenario,
                site,
                trampoline_distance(f_inst, site, target, cfg),
                plan.trace.initial[0],
                plan.trace.replay(),
                plan.trace,
                frag,
            )
        )
    return results


def analyze(
    f_inst: IrFunction, f_patched: IrFunction, spec: PatchSpec, sites: list[TrampolineSite]
) -> Hotpatch:
    return analyze_all(f_inst, f_patched, [spec], sites)[0].hotpatch


# comparison with the official fragment


def fragment_core(frag: Fragment, allocas: dict[str, Instr]) -> list[tuple]:
    """The fragment's computation with constants folded and stack reads marked."""
    consts = {i.dest: i.imm for i in frag.body if i.op == "const"}
    out = []
    for ins in frag.body:
        if ins.op == "const":
            continue
        if ins.op == "load" and isinstance(ins.args[0], str) and ins.args[0] in allocas:
            out.append(("frame", ins.dest, f"*{ins.args[0]}"))
            continue
        args = tuple(consts.get(a, a) if isinstance(a, str) else a for a in ins.args)
        out.append((ins.op, ins.dest, ins.type, ins.pred, args, ins.imm))
    out.append(("branch", consts.get(frag.guard.args[0], frag.guard.args[0])))
    return out


def hotpatch_core(hp: Hotpatch) -> list[tuple]:
    """The hotpatch body with frame reads of plain variables dropped."""
    out = []
    for b in hp.body.blocks:
        if b.label in (TAKE, PASS_LABEL):
            continue
        for ins in b.instrs:
            if ins.op == "call" and ins.callee == "frame_get":
                key = ins.args[1].value
                if key.startswith("*"):
                    out.append(("frame", ins.dest, key))
                continue
            if ins.op == "cond_br":
                out.append(("branch", ins.args[0]))
                continue
            if ins.is_terminator:
                out.append((ins.op, ins.targets))
                continue
            out.append((ins.op, ins.dest, ins.type, ins.pred, ins.args, ins.imm))
    return out
