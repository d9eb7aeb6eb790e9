"""The ten acceptance criteria, one test each, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are also
collected into the terminal summary.
"""
import json
import math
import time

import pytest

from conftest import ACCEPTANCE
from hotforge import harness
from hotforge.analyze import AnalysisError, fragment_core, hotpatch_core
from hotforge.bundle import IntegrityError, pack, unpack
from hotforge.cli import main
from hotforge.expr import Bin, Cmp, Const, Field, Lit, Var, render
from hotforge.fixtures import load_corpus, load_fixture
from hotforge.hotpatch import ActionSpec, Hotpatch, Op
from hotforge.instrument import instrument_module
from hotforge.ir import parse_function
from hotforge.runtime import REGISTRY_CAPACITY, PatchRegistry, RegistryError


def report(n: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {title}" + (f" ({detail})" if detail else "")
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def _cb(k: int) -> Bin:
    return Bin("shl", "i32", Field(Var("cbw"), k, f"CB{k}"), Lit(24 - 8 * (k - 2)))


def test_1_scenario_1_expression():
    t0 = time.perf_counter()
    fx = load_fixture("cve_2020_10021")
    (r,) = harness.build(fx).results
    elapsed = time.perf_counter() - t0
    n = Bin("or", "i32", Bin("or", "i32", Bin("or", "i32", _cb(2), _cb(3)), _cb(4)), _cb(5))
    want = Cmp("ge", "i32", Bin("mul", "i32", n, Const(512, "i32", "BLOCK_SIZE")), Var("memory_size"))
    text = render(r.exprs[0])
    ok = (
        r.site.kind == "entrance"
        and len(r.exprs) == 1
        and r.exprs[0] == want
        and text == "(((CB2<<24)|(CB3<<16)|(CB4<<8)|(CB5<<0)) * BLOCK_SIZE) >= memory_size"
        and elapsed < 1.0
    )
    report(1, "CVE-2020-10021 entrance site and substituted guard", ok, f"{text}; {elapsed * 1000:.0f} ms")


def test_2_scenario_2_1_hotpatches():
    t0 = time.perf_counter()
    fx = load_fixture("cve_2020_10062")
    b = harness.build(fx)
    elapsed = time.perf_counter() - t0
    allocas = b.instrumented.function(fx.function).allocas()
    kinds = [r.site.kind for r in b.results]
    same = [fragment_core(r.fragment, allocas) == hotpatch_core(r.hotpatch) for r in b.results]
    ok = kinds == ["loop_header", "loop_exit"] and same == [True, True] and elapsed < 1.0
    report(2, "CVE-2020-10062 two hotpatches equal to the official fragments", ok, f"{kinds}; {elapsed * 1000:.0f} ms")


def test_3_fixture_a_sites():
    _, rep = instrument_module(load_fixture("cve_2020_10062").vulnerable)
    kinds = [s.kind for s in rep.sites]
    ok = len(kinds) == 3 and set(kinds) == {"entrance", "loop_header", "loop_exit"}
    report(3, "Fixture A instruments exactly 3 trampolines", ok, ", ".join(kinds))


def test_4_oracle_equivalence():
    t0 = time.perf_counter()
    results = [harness.verify(fx, "exhaustive") for fx in load_corpus() if fx.fixable]
    elapsed = time.perf_counter() - t0
    bad = [r.line() for r in results if not r.ok]
    cases = sum(r.cases for r in results)
    ok = not bad and len(results) >= 8 and elapsed < 60
    report(4, "exhaustive verify passes on all fixable fixtures", ok,
           f"{len(results)} fixtures, {cases} cases, {elapsed:.1f} s" + ("; " + "; ".join(bad) if bad else ""))


def test_5_struct_edit_rejected():
    fx = load_fixture("struct_edit")
    try:
        harness.build(fx)
        kind = None
    except AnalysisError as e:
        kind = e.kind
    verdict = harness.verify(fx).reason
    ok = kind == "unsupported patch class" and verdict == "cannot fix: unsupported patch class"
    report(5, "struct-edit fixture rejected", ok, str(kind))


def test_6_dispatch_complexity():
    rows = harness.dispatch_comparisons((1, 2, 4, 8, 16, 32, 64))
    counts = [r["comparisons"] for r in rows]
    bounded = all(r["comparisons"] <= math.ceil(math.log2(r["n"])) + 1 for r in rows)
    ok = bounded and counts == sorted(counts)
    report(6, "binary-search comparisons within ceil(log2 n)+1 and nondecreasing", ok,
           ", ".join(f"{r['n']}:{r['comparisons']}" for r in rows))


def test_7_no_patch_transparency():
    rows = [harness.transparency(fx, samples=1000, seed=harness.DEFAULT_SEED) for fx in load_corpus()]
    mismatches = sum(r["mismatches"] for r in rows)
    ks = {k for r in rows for k in r["observed_k"]}
    ok = mismatches == 0 and ks == {str(harness.TRAMPOLINE_STEPS)} and all(r["samples"] == 1000 for r in rows)
    report(7, "empty registry is trace-equivalent, fixed cost per trampoline", ok,
           f"{len(rows)} fixtures x 1000 inputs, mismatches={mismatches}, k={sorted(ks)}")


def test_8_capacity():
    body = parse_function("fn hp(%frame: ptr) {\nentry:\n  ret 0\n}")
    reg = PatchRegistry()
    for k in range(64):
        reg.install(Hotpatch(f"p{k}", body, "f", k, [], ActionSpec(Op.DROP, -1)))
    try:
        reg.install(Hotpatch("p64", body, "f", 64, [], ActionSpec(Op.DROP, -1)))
        msg = ""
    except RegistryError as e:
        msg = str(e)
    ok = REGISTRY_CAPACITY == 64 and len(reg) == 64 and msg.startswith("registry full")
    report(8, "65th install fails", ok, msg)


def test_9_bundle_integrity():
    hps = [h for fx in load_corpus() if fx.fixable for h in harness.build(fx).hotpatches]
    round_trip = all(pack(unpack(pack(h))) == pack(h) for h in hps)
    accepted = 0
    tried = 0
    for h in hps:
        data = pack(h)
        # every alternative byte value for the transcribed fixture, one flip per byte elsewhere
        values = range(1, 256) if h.name == "filter_cve_2020_10021_0" else (0x01,)
        for i in range(len(data)):
            for d in values:
                bad = bytearray(data)
                bad[i] = (bad[i] + d) % 256 if len(values) > 1 else bad[i] ^ d
                tried += 1
                try:
                    unpack(bytes(bad))
                    accepted += 1
                except IntegrityError:
                    pass
    ok = round_trip and accepted == 0
    report(9, "single-byte mutations rejected, pack/unpack byte-identical", ok,
           f"{len(hps)} bundles, {tried} mutations, {accepted} accepted")


def test_10_bench_determinism(tmp_path, capsys):
    outs = []
    for k in range(2):
        path = tmp_path / f"bench{k}.json"
        assert main(["bench", "--seed", "12345", "-o", str(path)]) == 0
        outs.append(json.loads(path.read_text()))
    capsys.readouterr()
    ok = harness.strip_times(outs[0]) == harness.strip_times(outs[1])
    report(10, "bench output identical apart from wall-time fields", ok, f"{len(outs[0]['fixtures'])} fixture rows")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
