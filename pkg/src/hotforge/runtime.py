"""IR interpreter with a trampoline dispatcher and the active-hotpatch registry.

The registry plays the role of the device's active-patch list. It is keyed
by ``(site_id, seq)``: the site id stands in for the trampoline's return
address, ``seq`` is the installation order.

Every executed instruction costs one step. A trampoline costs
``TRAMPOLINE_STEPS`` (the instruction plus one dispatcher step) whenever
no hotpatch fires; hotpatch bodies run in their own environment and their
steps are counted separately.
"""
from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field
from typing import Callable

from hotforge.hotpatch import FRAME_ACCESSORS, PASS, Hotpatch, Op, PatchAction
from hotforge.ir import IrFunction, IrModule
from hotforge.values import UNDEF, Ptr, ScalarError, binop, compare, render, wrap

DEFAULT_MAX_STEPS = 1_000_000
HOTPATCH_MAX_STEPS = 100_000
TRAMPOLINE_STEPS = 2
REGISTRY_CAPACITY = 64

STACK_PREFIX = "stack:"
HOTPATCH_PREFIX = "hp:"


class ExecError(Exception):
    kind = "execution error"

    def __init__(self, message: str):
        super().__init__(message)
        self.env: ExecEnv | None = None


class StepLimitExceeded(ExecError):
    kind = "possible nontermination"


class UninitializedRead(ExecError):
    kind = "load of uninitialized cell"


class TypeMismatch(ExecError):
    kind = "type mismatch"


class UnknownFunction(ExecError):
    kind = "unknown function"


class FrameMarshalError(ExecError):
    kind = "frame marshal failure"


class IsolationError(ExecError):
    kind = "hotpatch isolation violation"


class RedirectError(ExecError):
    kind = "bad redirect target"


class RegistryError(Exception):
    pass


# memory


class Memory:
    """Cells addressed by symbolic pointers (region, offset)."""

    def __init__(self):
        self.cells: dict[tuple[str, int], object] = {}
        self._names = itertools.count()
        self._used: dict[str, int] = {}

    def fresh_region(self, base: str) -> str:
        n = self._used.get(base, 0)
        self._used[base] = n + 1
        return base if n == 0 else f"{base}#{n}"

    def allocate(self, base: str, values=()) -> Ptr:
        region = self.fresh_region(base)
        for off, v in enumerate(values):
            if isinstance(v, (list, tuple)):
                v = self.allocate(f"{region}.{off}", v)
            self.cells[(region, off)] = v
        return Ptr(region, 0)

    def read(self, p) -> object:
        if not isinstance(p, Ptr):
            raise TypeMismatch(f"load through non-pointer {p!r}")
        try:
            v = self.cells[(p.region, p.offset)]
        except KeyError:
            raise UninitializedRead(f"load of uninitialized cell {p}") from None
        if v is UNDEF:
            raise UninitializedRead(f"load of uninitialized cell {p}")
        return v

    def peek(self, p) -> object:
        if not isinstance(p, Ptr):
            return UNDEF
        return self.cells.get((p.region, p.offset), UNDEF)

    def write(self, p, value) -> None:
        if not isinstance(p, Ptr):
            raise TypeMismatch(f"store through non-pointer {p!r}")
        self.cells[(p.region, p.offset)] = value

    def snapshot(self) -> dict:
        return dict(self.cells)


class OverlayMemory(Memory):
    """Hotpatch view of program memory: reads fall through, writes stay local."""

    def __init__(self, parent: Memory):
        super().__init__()
        self.parent = parent
        self.own: set[str] = set()

    def allocate(self, base: str, values=()) -> Ptr:
        p = super().allocate(base, values)
        self.own.add(p.region)
        return p

    def read(self, p) -> object:
        if isinstance(p, Ptr) and p.region in self.own:
            return super().read(p)
        return self.parent.read(p)

    def write(self, p, value) -> None:
        if not isinstance(p, Ptr) or p.region not in self.own:
            raise IsolationError(f"hotpatch store outside its own cells: {p}")
        super().write(p, value)


def is_observable(region: str) -> bool:
    return not region.startswith((STACK_PREFIX, HOTPATCH_PREFIX))


# registry


@dataclass
class RegistryEntry:
    key: tuple[int, int]
    hotpatch: Hotpatch
    enabled: bool = True


class PatchRegistry:
    def __init__(self, capacity: int = REGISTRY_CAPACITY):
        self.capacity = capacity
        self.entries: list[RegistryEntry] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list[tuple[int, int]]:
        return [e.key for e in self.entries]

    def install(self, hotpatch: Hotpatch, seq: int | None = None) -> tuple[int, int]:
        if len(self.entries) >= self.capacity:
            raise RegistryError(f"registry full, max {self.capacity}")
        if seq is None:
            seq = next(self._seq)
            while any(e.key == (hotpatch.site_id, seq) for e in self.entries):
                seq = next(self._seq)
        key = (hotpatch.site_id, seq)
        keys = self.keys()
        i = bisect.bisect_left(keys, key)
        if i < len(keys) and keys[i] == key:
            raise RegistryError(f"duplicate key {key}")
        self.entries.insert(i, RegistryEntry(key, hotpatch))
        return key

    def _find(self, key) -> RegistryEntry:
        keys = self.keys()
        i = bisect.bisect_left(keys, tuple(key))
        if i == len(keys) or keys[i] != tuple(key):
            raise RegistryError(f"unknown key {tuple(key)}")
        return self.entries[i]

    def enable(self, key) -> None:
        self._find(key).enabled = True

    def disable(self, key) -> None:
        self._find(key).enabled = False

    def remove(self, key) -> None:
        self.entries.remove(self._find(key))

    def lookup(self, site_id: int) -> tuple[list[RegistryEntry], int]:
        """Entries for ``site_id`` in seq order, plus the binary-search probe count."""
        lo, hi, probes = 0, len(self.entries), 0
        while lo < hi:
            mid = (lo + hi) // 2
            probes += 1
            if self.entries[mid].key[0] < site_id:
                lo = mid + 1
            else:
                hi = mid
        out = []
        while lo < len(self.entries) and self.entries[lo].key[0] == site_id:
            out.append(self.entries[lo])
            lo += 1
        return out, probes


# execution state


@dataclass
class DataFrame:
    entries: dict[str, object]
    out: dict[str, object] = field(default_factory=dict)

    @classmethod
    def capture(cls, names: list[str], values: dict, memory: Memory) -> "DataFrame":
        entries = {}
        for name in names:
            if name.startswith("*"):
                ptr = values.get(name[1:])
                if ptr is None:
                    raise FrameMarshalError(f"frame marshal failure: %{name[1:]} unbound")
                entries[name] = memory.peek(ptr)
            elif name in values:
                entries[name] = values[name]
            else:
                raise FrameMarshalError(f"frame marshal failure: %{name} unbound")
        return cls(entries)


@dataclass
class Frame:
    function: IrFunction
    values: dict[str, object]
    block: str = ""
    index: int = 0


@dataclass
class ExecEnv:
    memory: Memory = field(default_factory=Memory)
    steps: int = 0
    trace: list[tuple[str, int, object]] = field(default_factory=list)
    stack: list[Frame] = field(default_factory=list)
    hits: list[int] = field(default_factory=list)
    dispatches: list[tuple[int, int]] = field(default_factory=list)  # (site, probes)
    actions: list[tuple[int, PatchAction]] = field(default_factory=list)
    hotpatch_runs: int = 0
    hotpatch_steps: int = 0

    @property
    def comparisons(self) -> int:
        return sum(c for _, c in self.dispatches)

    def observable_trace(self) -> list[tuple[str, int, object]]:
        return [t for t in self.trace if is_observable(t[0])]

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "trampoline_hits": list(self.hits),
            "dispatch_comparisons": [{"site": s, "comparisons": c} for s, c in self.dispatches],
            "actions": [{"site": s, **a.to_json()} for s, a in self.actions],
            "hotpatch_runs": self.hotpatch_runs,
            "hotpatch_steps": self.hotpatch_steps,
            "stores": [[r, o, render(v)] for r, o, v in self.trace],
        }


@dataclass
class ExecResult:
    value: object
    env: ExecEnv


class FrameHandle:
    """Opaque value bound to a hotpatch's frame parameter."""

    def __init__(self, frame: DataFrame):
        self.frame = frame


Observer = Callable[[Frame, str, int, "ExecEnv"], None]
Extern = Callable[["Interpreter", ExecEnv, list], object]


def apply_action(action: PatchAction, frame: Frame) -> tuple:
    """Control transfer for a dispatcher result: ("next",), ("return", code) or ("jump", label)."""
    if action.op is Op.PASS:
        return ("next",)
    if action.op is Op.DROP:
        return ("return", action.ret_code)
    if action.target not in frame.function.labels():
        raise RedirectError(f"redirect target {action.target!r} is not a label of {frame.function.name}")
    return ("jump", action.target)


class Interpreter:
    def __init__(
        self,
        module: IrModule,
        registry: PatchRegistry | None = None,
        *,
        max_steps: int = DEFAULT_MAX_STEPS,
        externs: dict[str, Extern] | None = None,
        observer: Observer | None = None,
    ):
        self.module = module
        self.registry = registry if registry is not None else PatchRegistry()
        self.max_steps = max_steps
        self.externs = dict(externs or {})
        self.observer = observer
        self._functions = {f.name: f for f in module.functions}

    def run(self, entry: str, args: list, memory: Memory | None = None) -> ExecResult:
        env = ExecEnv(memory=memory or Memory())
        try:
            f = self._function(entry)
            values = self.bind_args(f, args, env.memory)
            value = self._exec(f, values, env)
        except ExecError as e:
            e.env = env
            raise
        return ExecResult(value, env)

    def _function(self, name: str) -> IrFunction:
        try:
            return self._functions[name]
        except KeyError:
            raise UnknownFunction(f"unknown function {name!r}") from None

    @staticmethod
    def bind_args(f: IrFunction, args: list, memory: Memory) -> dict:
        if len(args) != len(f.params):
            raise TypeMismatch(f"{f.name} expects {len(f.params)} arguments, got {len(args)}")
        values = {}
        for k, ((name, ty), a) in enumerate(zip(f.params, args)):
            if ty == "ptr":
                if isinstance(a, (list, tuple)):
                    a = memory.allocate(f"arg{k}", a)
                elif not isinstance(a, (Ptr, FrameHandle)):
                    raise TypeMismatch(f"argument %{name} must be a pointer")
            elif isinstance(a, int) and not isinstance(a, bool):
                a = wrap(a, ty)
            else:
                raise TypeMismatch(f"argument %{name} must be an integer")
            values[name] = a
        return values

    def _exec(self, f: IrFunction, values: dict, env: ExecEnv):
        frame = Frame(f, values, f.entry, 0)
        env.stack.append(frame)
        blocks = {b.label: b.instrs for b in f.blocks}
        instrs = blocks[f.entry]
        try:
            while True:
                ins = instrs[frame.index]
                env.steps += 1
                if env.steps > self.max_steps:
                    raise StepLimitExceeded(f"step limit {self.max_steps} exceeded (possible nontermination)")
                if self.observer is not None:
                    self.observer(frame, frame.block, frame.index, env)
                op = ins.op
                if op == "br":
                    frame.block, frame.index = ins.targets[0], 0
                    instrs = blocks[frame.block]
                    continue
                if op == "cond_br":
                    c = self._val(frame, ins.args[0])
                    frame.block, frame.index = ins.targets[0 if c else 1], 0
                    instrs = blocks[frame.block]
                    continue
                if op == "ret":
                    return self._val(frame, ins.args[0]) if ins.args else 0
                if op == "trampoline":
                    env.steps += TRAMPOLINE_STEPS - 1
                    env.hits.append(ins.imm)
                    action = self.dispatch(ins.imm, frame, env)
                    transfer = apply_action(action, frame)
                    if transfer[0] == "return":
                        return transfer[1]
                    if transfer[0] == "jump":
                        frame.block, frame.index = transfer[1], 0
                        instrs = blocks[frame.block]
                        continue
                    frame.index += 1
                    continue
                try:
                    self._step(ins, frame, env)
                except ScalarError as e:
                    raise ExecError(str(e)) from None
                frame.index += 1
        finally:
            env.stack.pop()

    def _val(self, frame: Frame, a, allow_undef: bool = False):
        if isinstance(a, str):
            try:
                v = frame.values[a]
            except KeyError:
                raise ExecError(f"use of unbound value %{a}") from None
            if v is UNDEF and not allow_undef:
                raise UninitializedRead(f"use of %{a}, read from an uninitialized cell")
            return v
        if isinstance(a, int):
            return a
        return a.value

    def _step(self, ins, frame: Frame, env: ExecEnv) -> None:
        op = ins.op
        v = None
        if op == "const":
            v = wrap(ins.imm, ins.type)
        elif ins.is_binop:
            v = binop(op, ins.type, self._val(frame, ins.args[0]), self._val(frame, ins.args[1]))
        elif op == "cmp":
            v = compare(ins.pred, ins.type, self._val(frame, ins.args[0]), self._val(frame, ins.args[1]))
        elif op == "alloca":
            prefix = HOTPATCH_PREFIX if isinstance(env.memory, OverlayMemory) else STACK_PREFIX
            v = env.memory.allocate(f"{prefix}{frame.function.name}.{ins.dest}")
        elif op == "load":
            v = env.memory.read(self._val(frame, ins.args[0]))
            if isinstance(v, int) and ins.type != "ptr":
                v = wrap(v, ins.type)
        elif op == "store":
            value = self._val(frame, ins.args[0], allow_undef=True)
            ptr = self._val(frame, ins.args[1])
            env.memory.write(ptr, value)
            env.trace.append((ptr.region, ptr.offset, value))
        elif op == "getfield":
            base = self._val(frame, ins.args[0])
            if not isinstance(base, Ptr):
                raise TypeMismatch(f"getfield on non-pointer {base!r}")
            v = env.memory.read(Ptr(base.region, base.offset + ins.imm))
        elif op == "call":
            args = [self._val(frame, a, allow_undef=True) for a in ins.args]
            if ins.callee in self._functions:
                g = self._functions[ins.callee]
                v = self._exec(g, self.bind_args(g, args, env.memory), env)
            elif ins.callee in self.externs:
                v = self.externs[ins.callee](self, env, args)
            else:
                raise UnknownFunction(f"unknown function {ins.callee!r}")
        else:
            raise ExecError(f"cannot execute {op!r}")
        if ins.dest is not None:
            frame.values[ins.dest] = v

    # dispatcher

    def dispatch(self, site_id: int, frame: Frame, env: ExecEnv) -> PatchAction:
        entries, probes = self.registry.lookup(site_id)
        env.dispatches.append((site_id, probes))
        for entry in entries:
            if not entry.enabled:
                continue
            hp = entry.hotpatch
            df = DataFrame.capture(hp.required_vars, frame.values, env.memory)
            action, steps = run_hotpatch(hp, df, env.memory, frame.function)
            env.hotpatch_runs += 1
            env.hotpatch_steps += steps
            if action.op is not Op.PASS:
                env.actions.append((site_id, action))
                return action
        return PASS


def _frame_get(interp, env, args):
    handle, key = args
    try:
        return handle.frame.entries[key]
    except (AttributeError, KeyError):
        raise FrameMarshalError(f"frame marshal failure: no entry {key!r}") from None


def _frame_set(interp, env, args):
    handle, key, value = args
    handle.frame.out[key] = value
    return 0


FRAME_EXTERNS = {"frame_get": _frame_get, "frame_set": _frame_set}
assert set(FRAME_EXTERNS) == set(FRAME_ACCESSORS)


def run_hotpatch(
    hp: Hotpatch, df: DataFrame, memory: Memory, target: IrFunction | None = None
) -> tuple[PatchAction, int]:
    """Execute a hotpatch body in isolation; returns its action and step count."""
    interp = Interpreter(hp.module(), max_steps=HOTPATCH_MAX_STEPS, externs=FRAME_EXTERNS)
    result = interp.run(hp.body.name, [FrameHandle(df)], memory=OverlayMemory(memory))
    op = Op(result.value)
    if op is Op.PASS:
        return PASS, result.env.steps
    if op is Op.DROP:
        return PatchAction(Op.DROP, int(df.out.get("ret_code", 0))), result.env.steps
    idx = df.out.get("target")
    label = hp.action.target
    if target is not None and isinstance(idx, int) and 0 <= idx < len(target.blocks):
        label = target.blocks[idx].label
    return PatchAction(Op.REDIRECT, 0, label), result.env.steps


def interpret(
    m: IrModule,
    entry: str,
    args: list,
    registry: PatchRegistry | None = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    **kwargs,
) -> tuple[object, ExecEnv]:
    result = Interpreter(m, registry, max_steps=max_steps, **kwargs).run(entry, args)
    return result.value, result.env
