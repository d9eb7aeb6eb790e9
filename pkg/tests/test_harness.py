import dataclasses
import math

import pytest

from hotforge import harness
from hotforge.fixtures import domain_size, enumerate_inputs, load_corpus, load_fixture, sample_inputs
from hotforge.ir import parse_module

CORPUS = load_corpus()
FIXABLE = [fx for fx in CORPUS if fx.fixable]


def test_corpus_shape():
    assert len(CORPUS) >= 8
    assert [fx.tag for fx in CORPUS] == sorted(fx.tag for fx in CORPUS)
    assert [fx.tag for fx in CORPUS if not fx.fixable] == ["struct_edit"]


@pytest.mark.parametrize("fx", FIXABLE, ids=lambda fx: fx.tag)
def test_domain_contains_exploit(fx):
    """The oracle check is not vacuous: some input tells vulnerable and patched apart."""
    differs = sum(
        harness.outcome(fx.vulnerable, fx.function, harness._fresh(a))
        != harness.outcome(fx.patched, fx.function, harness._fresh(a))
        for a in enumerate_inputs(fx.domain)
    )
    assert 0 < differs < domain_size(fx.domain)


def test_cve_10021_domain():
    fx = load_fixture("cve_2020_10021")
    # CB2..CB5 in 0..=3, memory_size in {0, 64, 256}
    assert domain_size(fx.domain) == 4**4 * 3
    assert harness.verify(fx).status == "pass"


def test_struct_edit_cannot_fix():
    r = harness.verify(load_fixture("struct_edit"))
    assert r.status == "cannot fix"
    assert r.reason == "cannot fix: unsupported patch class"


def _sabotage(fx):
    hps = harness.build(fx).hotpatches
    h = hps[0]
    body = h.body.copy()
    for b in body.blocks:
        for i, ins in enumerate(b.instrs):
            if ins.op == "cmp" and isinstance(ins.args[1], int):
                b.instrs[i] = dataclasses.replace(ins, args=(ins.args[0], ins.args[1] + 1))
    assert body != h.body
    return [dataclasses.replace(h, body=body)] + hps[1:]


def test_sabotaged_hotpatch_fails():
    fx = load_fixture("cve_2020_10062")
    r = harness.verify(fx, hotpatches=_sabotage(fx))
    assert r.status == "fail"
    ce = r.counterexample
    assert ce["patched"] != ce["hotpatched"]
    # the counterexample reproduces
    args = ce["args"]
    b = harness.build(fx)
    assert harness.outcome(fx.patched, fx.function, harness._fresh(args)) == tuple(ce["patched"])
    reg = b.registry(_sabotage(fx))
    assert harness.outcome(b.instrumented, fx.function, harness._fresh(args), reg) != tuple(ce["patched"])


def test_random_mode_reproducible(monkeypatch):
    fx = load_fixture("int_overflow")
    a = harness.verify(fx, "random", 100, seed=42)
    b = harness.verify(fx, "random", 100, seed=42)
    assert a.to_json() == b.to_json() and a.seed == 42 and a.cases == 100
    monkeypatch.setenv("HOTFORGE_SEED", "0x10")
    assert harness.default_seed() == 16
    assert harness.verify(fx, "random", 10).seed == 16
    monkeypatch.delenv("HOTFORGE_SEED")
    assert harness.default_seed() == harness.DEFAULT_SEED


def test_sample_inputs_seeded():
    fx = load_fixture("cve_2020_10062")
    assert list(sample_inputs(fx.random_domain, 20, 1)) == list(sample_inputs(fx.random_domain, 20, 1))
    assert list(sample_inputs(fx.random_domain, 20, 1)) != list(sample_inputs(fx.random_domain, 20, 2))


@pytest.mark.parametrize("fx", CORPUS, ids=lambda fx: fx.tag)
def test_transparency(fx):
    t = harness.transparency(fx, samples=200, seed=7)
    assert t["mismatches"] == 0
    assert t["observed_k"] == [str(harness.TRAMPOLINE_STEPS)]


# diff


def test_diff_identical_is_empty():
    f = load_fixture("int_overflow").vulnerable.functions[0]
    res = harness.diff_functions(f, f)
    assert res.spans == [] and res.warnings == []


def test_diff_two_inserted():
    v = parse_module("fn f(%a: i32) {\nentry:\n  %x = add i32 %a, 1\n  ret %x\n}").functions[0]
    p = parse_module(
        "fn f(%a: i32) {\nentry:\n  %x = add i32 %a, 1\n  %y = mul i32 %x, 2\n  %z = add i32 %y, 0\n  ret %x\n}"
    ).functions[0]
    res = harness.diff_functions(v, p)
    assert res.ranges == ["entry:1..entry:2"]
    block, i, j = res.spans[0]
    assert j - i + 1 == 2


def test_diff_cve_10062_two_spans():
    fx = load_fixture("cve_2020_10062")
    res = harness.diff_functions(fx.vulnerable.functions[0], fx.patched.functions[0])
    assert res.ranges == [s.range_text for s in fx.specs]
    assert "non-contiguous patch" in res.warnings


@pytest.mark.parametrize("fx", CORPUS, ids=lambda fx: fx.tag)
def test_diff_recovers_fixture_ranges(fx):
    res = harness.diff_functions(fx.vulnerable.function(fx.function), fx.patched.function(fx.function))
    if fx.tag == "struct_edit":
        assert "patched function also removes or changes instructions" in res.warnings
    else:
        assert res.ranges == [s.range_text for s in fx.specs]


# bench


def test_dispatch_comparisons():
    rows = harness.dispatch_comparisons()
    assert [r["n"] for r in rows] == [1, 2, 4, 8, 16, 32, 64]
    counts = [r["comparisons"] for r in rows]
    assert counts == sorted(counts)
    assert all(r["comparisons"] <= math.ceil(math.log2(r["n"])) + 1 for r in rows)


def test_bench_fixture_a_overhead():
    row = harness.bench_fixture(load_fixture("cve_2020_10062"), seed=1)
    assert row["trampolines"] == 3
    assert row["static_step_overhead"] == 3 * harness.TRAMPOLINE_STEPS
    assert row["measured_overhead"] == {"args": [[[1]], [0]], "steps": 6, "trampoline_hits": 3}
    assert [h["trigger"] for h in row["hotpatches"]] == ["loop_header", "loop_exit"]
    assert row["analysis_ms"] >= 0


def test_bench_deterministic():
    a = harness.bench(CORPUS, seed=3)
    b = harness.bench(CORPUS, seed=3)
    assert harness.strip_times(a) == harness.strip_times(b)
    failed = [r for r in a["fixtures"] if r["status"] != "ok"]
    assert [(r["tag"], r["reason"]) for r in failed] == [("struct_edit", "cannot fix: unsupported patch class")]
    table = harness.bench_table(a)
    assert "cve_2020_10021" in table and "k = 2" in table
