"""Control-flow analyses: dominators, post-dominators, natural loops, branch regions."""
from __future__ import annotations

from dataclasses import dataclass, field

from hotforge.ir.model import IrFunction


class IrreducibleCFG(Exception):
    def __init__(self, function: str, edge: tuple[str, str]):
        super().__init__(f"irreducible control flow in {function}: edge {edge[0]} -> {edge[1]}")
        self.function = function
        self.edge = edge


@dataclass
class LoopInfo:
    header: str
    body: frozenset[str]
    exits: list[str]
    latches: list[str]
    depth: int = 1
    condition_values: list[str] = field(default_factory=list)
    kind = "loop"

    def contains(self, block: str) -> bool:
        return block in self.body

    @property
    def blocks(self) -> frozenset[str]:
        return self.body


@dataclass
class BranchRegion:
    header: str  # block ending in the controlling cond_br
    body: frozenset[str]  # blocks strictly between header and join
    arms: list[str]
    exits: list[str]  # [join]
    depth: int = 1
    condition_values: list[str] = field(default_factory=list)
    kind = "branch"

    def contains(self, block: str) -> bool:
        return block in self.body

    @property
    def blocks(self) -> frozenset[str]:
        return self.body | {self.header}


def _idoms(order: list[str], entry: str, preds: dict[str, list[str]]) -> dict[str, str]:
    # Cooper, Harvey & Kennedy iterative algorithm over reverse postorder.
    index = {b: i for i, b in enumerate(order)}
    idom = {entry: entry}

    def intersect(a, b):
        while a != b:
            while index[a] > index[b]:
                a = idom[a]
            while index[b] > index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for b in order[1:]:
            ps = [p for p in preds[b] if p in idom]
            if not ps:
                continue
            new = ps[0]
            for p in ps[1:]:
                new = intersect(p, new)
            if idom.get(b) != new:
                idom[b] = new
                changed = True
    return idom


def _postorder(entry: str, succ: dict[str, list[str]]) -> tuple[list[str], list[tuple[str, str]]]:
    """Iterative DFS; returns postorder and retreating edges (target on stack)."""
    post, retreating = [], []
    seen, on_stack = {entry}, {entry}
    stack = [(entry, iter(succ[entry]))]
    while stack:
        node, it = stack[-1]
        for s in it:
            if s in on_stack:
                retreating.append((node, s))
            elif s not in seen:
                seen.add(s)
                on_stack.add(s)
                stack.append((s, iter(succ[s])))
                break
        else:
            stack.pop()
            on_stack.discard(node)
            post.append(node)
    return post, retreating


class CfgInfo:
    """CFG facts for one function. Construct via ``analyze_cfg``."""

    EXIT = "<exit>"

    def __init__(self, f: IrFunction):
        self.function = f
        self.order = f.labels()
        self.succ = {b.label: list(dict.fromkeys(b.terminator.targets)) for b in f.blocks}
        self.preds: dict[str, list[str]] = {label: [] for label in self.order}
        for b in self.order:
            for s in self.succ[b]:
                self.preds[s].append(b)
        post, retreating = _postorder(f.entry, self.succ)
        self.rpo = post[::-1]
        self.reachable = set(self.rpo)
        self.idom = _idoms(self.rpo, f.entry, self.preds)
        for u, v in retreating:
            if not self.dominates(v, u):
                raise IrreducibleCFG(f.name, (u, v))
        self.ret_blocks = [
            b.label for b in f.blocks if b.terminator.op == "ret" and b.label in self.reachable
        ]
        self.ipdom = self._post_dominators()
        self.loops = self._find_loops()
        self.branch_regions = self._find_branch_regions()
        self._assign_depths()
        for r in self.regions:
            r.condition_values = condition_closure(f, self._controlling_values(r))

    # dominance

    def dominates(self, a: str, b: str) -> bool:
        if b not in self.idom or a not in self.idom:
            return False
        while True:
            if a == b:
                return True
            parent = self.idom[b]
            if parent == b:
                return False
            b = parent

    def strictly_dominates(self, a: str, b: str) -> bool:
        return a != b and self.dominates(a, b)

    def dom_path(self, a: str, b: str) -> list[str]:
        """Dominator-tree path from ``a`` down to ``b`` (requires a dom b)."""
        path = [b]
        while path[-1] != a:
            parent = self.idom[path[-1]]
            if parent == path[-1]:
                raise ValueError(f"{a} does not dominate {b}")
            path.append(parent)
        return path[::-1]

    def dominates_exit(self, block: str) -> bool:
        return all(self.dominates(block, r) for r in self.ret_blocks)

    def _post_dominators(self) -> dict[str, str]:
        rsucc = {b: list(self.preds[b]) for b in self.order}
        rsucc[self.EXIT] = list(self.ret_blocks)
        rpreds = {b: list(self.succ[b]) for b in self.order}
        for r in self.ret_blocks:
            rpreds[r].append(self.EXIT)
        rpreds[self.EXIT] = []
        post, _ = _postorder(self.EXIT, rsucc)
        return _idoms(post[::-1], self.EXIT, rpreds)

    # regions

    def _find_loops(self) -> list[LoopInfo]:
        bodies: dict[str, set[str]] = {}
        latches: dict[str, list[str]] = {}
        for u in self.rpo:
            for h in self.succ[u]:
                if self.dominates(h, u):
                    body = bodies.setdefault(h, {h})
                    latches.setdefault(h, []).append(u)
                    work = [u]
                    while work:
                        x = work.pop()
                        if x not in body:
                            body.add(x)
                            work.extend(p for p in self.preds[x] if p in self.reachable)
        loops = []
        for h in self.order:
            if h not in bodies:
                continue
            body = frozenset(bodies[h])
            exits = [
                b
                for b in self.order
                if b not in body and any(p in body for p in self.preds[b])
            ]
            loops.append(LoopInfo(h, body, exits, latches[h]))
        return loops

    def _find_branch_regions(self) -> list[BranchRegion]:
        regions = []
        for label in self.order:
            if label not in self.reachable:
                continue
            term = self.function.block(label).terminator
            if term.op != "cond_br" or len(self.succ[label]) != 2:
                continue
            join = self.ipdom.get(label)
            if join is None or join == self.EXIT:
                continue
            body, work = set(), [s for s in self.succ[label] if s != join]
            while work:
                x = work.pop()
                if x in body or x == join:
                    continue
                body.add(x)
                work.extend(self.succ[x])
            if label in body or not all(self.strictly_dominates(label, b) for b in body):
                continue
            arms = [s for s in self.succ[label] if s != join]
            regions.append(BranchRegion(label, frozenset(body), arms, [join]))
        return regions

    @property
    def regions(self) -> list:
        return [*self.loops, *self.branch_regions]

    def _encloses(self, outer, inner) -> bool:
        if outer is inner:
            return False
        if isinstance(inner, BranchRegion) and isinstance(outer, BranchRegion):
            return inner.header in outer.body
        return inner.header in outer.body and not (
            isinstance(outer, LoopInfo) and isinstance(inner, LoopInfo) and outer.header == inner.header
        )

    def _assign_depths(self) -> None:
        regions = self.regions
        memo: dict[int, int] = {}

        def depth(r, guard=()):
            if id(r) in memo:
                return memo[id(r)]
            outers = [q for q in regions if q not in guard and self._encloses(q, r)]
            d = 1 + max((depth(q, guard + (r,)) for q in outers), default=0)
            memo[id(r)] = d
            return d

        for r in regions:
            r.depth = depth(r)

    def enclosing_regions(self, block: str) -> list:
        """Regions whose body contains ``block``, innermost first."""
        found = [r for r in self.regions if r.contains(block)]
        return sorted(found, key=lambda r: (-r.depth, len(r.body)))

    def innermost_region(self, block: str):
        found = self.enclosing_regions(block)
        return found[0] if found else None

    def loops_containing(self, block: str) -> list[LoopInfo]:
        return [lp for lp in self.loops if block in lp.body]

    def _controlling_values(self, region) -> list[str]:
        f = self.function
        if isinstance(region, BranchRegion):
            blocks = [region.header]
        else:
            blocks = [
                b for b in self.order if b in region.body and any(s not in region.body for s in self.succ[b])
            ]
        out = []
        for b in blocks:
            term = f.block(b).terminator
            if term.op == "cond_br" and isinstance(term.args[0], str):
                out.append(term.args[0])
        return out


def analyze_cfg(f: IrFunction) -> CfgInfo:
    return CfgInfo(f)


def condition_closure(f: IrFunction, roots: list[str]) -> list[str]:
    """Values feeding ``roots`` through pure ops, loads, and alloca store/load pairs.

    Calls and parameters are leaves: the closure is intraprocedural.
    """
    defs = f.definitions()
    stores: dict[str, list[str]] = {}
    for _, _, ins in f.instructions():
        if ins.op == "store" and isinstance(ins.args[1], str) and isinstance(ins.args[0], str):
            stores.setdefault(ins.args[1], []).append(ins.args[0])
    seen: set[str] = set()
    work = list(roots)
    while work:
        v = work.pop()
        if v in seen:
            continue
        seen.add(v)
        if v not in defs:
            continue
        ins = defs[v][2]
        if ins.op == "call" or ins.op == "alloca":
            continue
        work.extend(ins.uses())
        if ins.op == "load":
            ptr = ins.args[0]
            if isinstance(ptr, str) and ptr in defs and defs[ptr][2].op == "alloca":
                work.extend(stores.get(ptr, []))
    rank = {p: i for i, (p, _) in enumerate(f.params)}
    for i, v in enumerate(defs):
        rank[v] = len(f.params) + i
    return sorted(seen, key=lambda v: rank.get(v, len(rank)))


def pointer_sources(f: IrFunction, values: list[str]) -> list[str]:
    """The subset of ``values`` that make a condition statically unknowable."""
    types = f.value_types()
    defs = f.definitions()
    out = []
    for v in values:
        ins = defs.get(v, (None, None, None))[2]
        if ins is not None and ins.op == "alloca":
            continue
        if types.get(v) == "ptr" or (ins is not None and ins.op == "call"):
            out.append(v)
    return out


def is_complex(region, f: IrFunction) -> bool:
    if region.depth > 1:
        return True
    return bool(pointer_sources(f, region.condition_values))
