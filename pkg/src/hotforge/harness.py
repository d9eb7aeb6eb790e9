"""Equivalence checking, the patch differ and the bench suite behind the CLI."""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction

from hotforge.analyze import AnalysisError, AnalysisResult, PatchSpec, analyze_all
from hotforge.bundle import pack, unpack
from hotforge.fixtures import FixturePair, domain_size, enumerate_inputs, sample_inputs
from hotforge.hotpatch import ActionSpec, Hotpatch
from hotforge.instrument import InstrumentReport, instrument_module, trampoline_static_overhead
from hotforge.ir import Instr, IrBlock, IrFunction, IrModule, format_instr
from hotforge.runtime import TRAMPOLINE_STEPS, ExecError, PatchRegistry, interpret
from hotforge.values import render

DEFAULT_SEED = 0x5EED_2020
RANDOM_SAMPLES = 1000


def default_seed() -> int:
    env = os.environ.get("HOTFORGE_SEED")
    return int(env, 0) if env else DEFAULT_SEED


# execution outcomes


def outcome(m: IrModule, entry: str, args: list, registry: PatchRegistry | None = None):
    """Return value plus observable trace, or the error class."""
    try:
        value, env = interpret(m, entry, args, registry)
    except ExecError as e:
        return ("error", e.kind)
    return ("ok", render(value), [(r, o, render(v)) for r, o, v in env.observable_trace()])


def _show_args(args: list) -> list:
    return [render(a) if not isinstance(a, list) else _show_args(a) for a in args]


# building hotpatches for a fixture


@dataclass
class Build:
    instrumented: IrModule
    report: InstrumentReport
    results: list[AnalysisResult]

    @property
    def hotpatches(self) -> list[Hotpatch]:
        return [r.hotpatch for r in self.results]

    def registry(self, hotpatches: list[Hotpatch] | None = None) -> PatchRegistry:
        reg = PatchRegistry()
        for h in hotpatches if hotpatches is not None else self.hotpatches:
            reg.install(h)
        return reg


def build(fx: FixturePair) -> Build:
    inst, report = instrument_module(fx.vulnerable)
    results = analyze_all(
        inst.function(fx.function), fx.patched.function(fx.function), fx.specs, report.sites
    )
    return Build(inst, report, results)


# verify


@dataclass
class VerifyReport:
    tag: str
    mode: str
    status: str  # "pass", "fail" or "cannot fix"
    cases: int = 0
    seed: int | None = None
    reason: str = ""
    counterexample: dict | None = None

    @property
    def ok(self) -> bool:
        return self.status == "pass"

    def to_json(self) -> dict:
        return {
            "tag": self.tag,
            "mode": self.mode,
            "status": self.status,
            "cases": self.cases,
            "seed": self.seed,
            "reason": self.reason,
            "counterexample": self.counterexample,
        }

    def line(self) -> str:
        text = f"{self.tag:<16} {self.mode:<10} {self.status:<10} cases={self.cases}"
        if self.seed is not None:
            text += f" seed={self.seed}"
        if self.reason:
            text += f"  {self.reason}"
        return text


def verify(
    fx: FixturePair,
    mode: str = "exhaustive",
    samples: int = RANDOM_SAMPLES,
    seed: int | None = None,
    hotpatches: list[Hotpatch] | None = None,
) -> VerifyReport:
    """Compare the patched module with the instrumented vulnerable one plus hotpatches."""
    if mode not in ("exhaustive", "random"):
        raise ValueError(f"unknown verify mode {mode!r}")
    if mode == "exhaustive":
        seed = None
    elif seed is None:
        seed = default_seed()
    try:
        b = build(fx)
    except AnalysisError as e:
        return VerifyReport(fx.tag, mode, "cannot fix", seed=seed, reason=f"cannot fix: {e.kind}")
    if hotpatches is None:
        # run what a device would receive
        hotpatches = [unpack(pack(h)) for h in b.hotpatches]
    registry = b.registry(hotpatches)
    if mode == "exhaustive":
        inputs = enumerate_inputs(fx.domain)
    else:
        inputs = sample_inputs(fx.random_domain, samples, seed)
    n = 0
    for args in inputs:
        n += 1
        want = outcome(fx.patched, fx.function, _fresh(args))
        got = outcome(b.instrumented, fx.function, _fresh(args), registry)
        if want != got:
            return VerifyReport(
                fx.tag,
                mode,
                "fail",
                n,
                seed,
                "patched and hotpatched runs differ",
                {"args": _show_args(args), "patched": list(want), "hotpatched": list(got)},
            )
    return VerifyReport(fx.tag, mode, "pass", n, seed)


def _fresh(args: list) -> list:
    return [_fresh(a) if isinstance(a, list) else a for a in args]


def transparency(fx: FixturePair, samples: int = RANDOM_SAMPLES, seed: int | None = None) -> dict:
    """Empty-registry comparison of the original and instrumented vulnerable module."""
    seed = default_seed() if seed is None else seed
    inst, _ = instrument_module(fx.vulnerable)
    mismatches = 0
    per_hit: set[Fraction] = set()
    for args in sample_inputs(fx.random_domain, samples, seed):
        a = _run_full(fx.vulnerable, fx.function, _fresh(args))
        b = _run_full(inst, fx.function, _fresh(args))
        if a[:2] != b[:2]:
            mismatches += 1
        elif b[3]:
            per_hit.add(Fraction(b[2] - a[2], b[3]))
        elif b[2] != a[2]:
            per_hit.add(Fraction(-1))
    return {
        "tag": fx.tag,
        "samples": samples,
        "seed": seed,
        "mismatches": mismatches,
        "k": TRAMPOLINE_STEPS,
        "observed_k": [str(k) for k in sorted(per_hit)],
        "overhead_is_k_per_hit": per_hit <= {Fraction(TRAMPOLINE_STEPS)},
    }


def _run_full(m: IrModule, entry: str, args: list):
    try:
        value, env = interpret(m, entry, args)
    except ExecError as e:
        env = e.env
        return ("error", e.kind), [], env.steps if env else None, len(env.hits) if env else 0
    return ("ok", render(value)), [(r, o, render(v)) for r, o, v in env.trace], env.steps, len(env.hits)


# diff


@dataclass
class DiffResult:
    function: str
    spans: list[tuple[str, int, int]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ranges(self) -> list[str]:
        return [f"{b}:{i}..{b}:{j}" for b, i, j in self.spans]

    def to_json(self) -> dict:
        return {"function": self.function, "ranges": self.ranges, "warnings": self.warnings}


def _lines(f: IrFunction) -> list[tuple[str, str, int]]:
    """(text, block, index); labels carry index -1."""
    out = []
    for b in f.blocks:
        out.append((f"{b.label}:", b.label, -1))
        out.extend((format_instr(ins), b.label, i) for i, ins in enumerate(b.instrs))
    return out


def _lcs_marks(a: list[str], b: list[str]) -> tuple[list[bool], list[bool]]:
    n, m = len(a), len(b)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            dp[i][j] = dp[i + 1][j + 1] + 1 if a[i] == b[j] else max(dp[i + 1][j], dp[i][j + 1])
    keep_a, keep_b = [False] * n, [False] * m
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            keep_a[i] = keep_b[j] = True
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            i += 1
        else:
            j += 1
    return keep_a, keep_b


def diff_functions(vuln: IrFunction, patched: IrFunction) -> DiffResult:
    """Suggest patch ranges: runs of instructions present only in the patched function."""
    la, lb = _lines(vuln), _lines(patched)
    keep_a, keep_b = _lcs_marks([t for t, _, _ in la], [t for t, _, _ in lb])
    res = DiffResult(patched.name)
    if not all(keep_a):
        res.warnings.append("patched function also removes or changes instructions")
    runs: list[list[tuple[str, str, int]]] = []
    prev = False
    for line, kept in zip(lb, keep_b):
        if not kept:
            if not prev:
                runs.append([])
            runs[-1].append(line)
        prev = not kept
    for run in runs:
        instrs = [(b, i) for _, b, i in run if i >= 0]
        if not instrs:
            continue
        block = instrs[0][0]
        idx = [i for b, i in instrs if b == block]
        res.spans.append((block, min(idx), max(idx)))
    if len(res.spans) > 1:
        res.warnings.append("non-contiguous patch")
    return res


# bench

REGISTRY_SIZES = (1, 2, 4, 8, 16, 32, 64)


def dispatch_comparisons(sizes=REGISTRY_SIZES) -> list[dict]:
    """Worst-case lookup probes for registries of each size."""
    body = IrFunction("nop", [("hp.frame", "ptr")], [IrBlock("entry", [Instr("ret", args=(0,))])])
    rows = []
    for n in sizes:
        reg = PatchRegistry()
        for sid in range(n):
            reg.install(Hotpatch(f"p{sid}", body, "f", sid, [], ActionSpec.parse("drop:0")))
        worst = max(reg.lookup(sid)[1] for sid in range(-1, n + 1))
        rows.append({"n": n, "comparisons": worst, "bound": math.ceil(math.log2(n)) + 1})
    return rows


def bench_fixture(fx: FixturePair, seed: int) -> dict:
    row: dict = {"tag": fx.tag, "cve_id": fx.cve_id}
    t0 = time.perf_counter()
    try:
        b = build(fx)
    except AnalysisError as e:
        row.update(status="failed", reason=f"cannot fix: {e.kind}", analysis_ms=None)
        return row
    analysis_ms = (time.perf_counter() - t0) * 1000
    f_orig = fx.vulnerable.function(fx.function)
    f_inst = b.instrumented.function(fx.function)
    sizes = [len(pack(h)) for h in b.hotpatches]
    tr = transparency(fx, samples=50, seed=seed)
    first = next(enumerate_inputs(fx.domain))
    plain = _run_full(fx.vulnerable, fx.function, _fresh(first))
    hooked = _run_full(b.instrumented, fx.function, _fresh(first))
    row.update(
        status="ok",
        analysis_ms=round(analysis_ms, 3),
        hotpatches=[
            {
                "name": r.hotpatch.name,
                "site": r.site.site_id,
                "trigger": r.site.kind,
                "scenario": r.scenario.label,
                "instructions": r.hotpatch.instruction_count(),
                "bundle_bytes": size,
            }
            for r, size in zip(b.results, sizes)
        ],
        trampolines=trampoline_static_overhead(f_orig, f_inst),
        step_overhead_per_trampoline=TRAMPOLINE_STEPS,
        static_step_overhead=trampoline_static_overhead(f_orig, f_inst) * TRAMPOLINE_STEPS,
        measured_overhead={
            "args": _show_args(first),
            "steps": hooked[2] - plain[2],
            "trampoline_hits": hooked[3],
        },
        transparent=tr["mismatches"] == 0 and tr["overhead_is_k_per_hit"],
    )
    return row


TIME_FIELDS = ("analysis_ms", "wall_ms")


def bench(fixtures: list[FixturePair], seed: int | None = None) -> dict:
    seed = default_seed() if seed is None else seed
    t0 = time.perf_counter()
    rows = sorted((bench_fixture(fx, seed) for fx in fixtures), key=lambda r: r["tag"])
    return {
        "seed": seed,
        "k": TRAMPOLINE_STEPS,
        "dispatch": dispatch_comparisons(),
        "fixtures": rows,
        "wall_ms": round((time.perf_counter() - t0) * 1000, 3),
    }


def strip_times(obj):
    if isinstance(obj, dict):
        return {k: strip_times(v) for k, v in obj.items() if k not in TIME_FIELDS}
    if isinstance(obj, list):
        return [strip_times(v) for v in obj]
    return obj


def bench_table(report: dict) -> str:
    head = f"{'fixture':<16} {'status':<7} {'ms':>8} {'site':<14} {'instrs':>6} {'bytes':>6} {'tramps':>6} {'k*t':>5}"
    lines = [head, "-" * len(head)]
    for r in report["fixtures"]:
        if r["status"] != "ok":
            lines.append(f"{r['tag']:<16} {'failed':<7} {'-':>8} {r['reason']}")
            continue
        for j, h in enumerate(r["hotpatches"]):
            first = j == 0
            lines.append(
                f"{r['tag'] if first else '':<16} {'ok' if first else '':<7} "
                f"{(format(r['analysis_ms'], '.2f') if first else ''):>8} {h['trigger']:<14} "
                f"{h['instructions']:>6} {h['bundle_bytes']:>6} "
                f"{(r['trampolines'] if first else ''):>6} {(r['static_step_overhead'] if first else ''):>5}"
            )
    lines.append("")
    lines.append("dispatch comparisons: " + ", ".join(f"n={d['n']}:{d['comparisons']}" for d in report["dispatch"]))
    lines.append(f"trampoline cost k = {report['k']} steps per executed trampoline")
    return "\n".join(lines)
