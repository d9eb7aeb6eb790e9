import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hotforge.analyze import analyze_all
from hotforge.fixtures import load_fixture
from hotforge.harness import build
from hotforge.hotpatch import PASS, ActionSpec, Hotpatch, Op, PatchAction
from hotforge.instrument import instrument_module
from hotforge.ir import parse_function, parse_module, print_module
from hotforge.runtime import (
    REGISTRY_CAPACITY,
    TRAMPOLINE_STEPS,
    ExecEnv,
    ExecError,
    Frame,
    Interpreter,
    IsolationError,
    Memory,
    PatchRegistry,
    RedirectError,
    RegistryError,
    StepLimitExceeded,
    UninitializedRead,
    apply_action,
    interpret,
)
from hotforge.values import Ptr

PASS_BODY = parse_function("fn hp(%frame: ptr) {\nentry:\n  ret 0\n}")


def dummy(site_id: int, name: str = "hp") -> Hotpatch:
    return Hotpatch(name, PASS_BODY, "f", site_id, [], ActionSpec(Op.DROP, -1))


@pytest.fixture(scope="module")
def fixture_a():
    return load_fixture("cve_2020_10062")


def test_return_constant():
    m = parse_module("fn main() { entry: ret 7 }")
    assert interpret(m, "main", [])[0] == 7


def test_fixture_a_decodes_length(fixture_a):
    # 0x81 0x81 0x01: 1 + (1 << 7) + (1 << 14)
    value, env = interpret(fixture_a.vulnerable, "packet_length_decode", [[[129, 129, 1]], [0]])
    assert value == 0
    assert env.memory.read(Ptr("arg1", 0)) == 16513


def test_instrumented_fixture_a_transparent(fixture_a):
    inst, _ = instrument_module(fixture_a.vulnerable)
    args = [[[129, 129, 1]], [0]]
    v1, e1 = interpret(fixture_a.vulnerable, "packet_length_decode", [[[129, 129, 1]], [0]])
    v2, e2 = interpret(inst, "packet_length_decode", args)
    assert v1 == v2 and e1.trace == e2.trace
    # entrance + three loop headers + one exit
    assert e2.hits == [0, 1, 1, 1, 2]
    assert e2.steps - e1.steps == TRAMPOLINE_STEPS * 5 == 10
    assert all(c == 0 for _, c in e2.dispatches) and e2.hotpatch_runs == 0


def test_step_limit():
    m = parse_module("fn spin() {\nentry:\n  br entry\n}")
    with pytest.raises(StepLimitExceeded, match="possible nontermination"):
        interpret(m, "spin", [], max_steps=500)


def test_uninitialized_load():
    m = parse_module("fn f() {\nentry:\n  %c = alloca i32\n  %v = load i32 %c\n  ret %v\n}")
    with pytest.raises(UninitializedRead):
        interpret(m, "f", [])


def test_unknown_function_and_arity():
    m = parse_module("fn f(%a: i32) { entry: ret %a }")
    with pytest.raises(ExecError, match="unknown function"):
        interpret(m, "g", [])
    with pytest.raises(ExecError, match="expects 1 arguments"):
        interpret(m, "f", [])


def test_i32_wraps():
    m = parse_module("fn f(%a: i32) {\nentry:\n  %b = add i32 %a, 1\n  ret %b\n}")
    assert interpret(m, "f", [2**31 - 1])[0] == -(2**31)


# registry


def test_registry_sorted_iteration():
    reg = PatchRegistry()
    for site, seq in [(5, 0), (1, 3), (3, 1), (1, 0), (9, 2)]:
        reg.install(dummy(site), seq)
    assert reg.keys() == sorted(reg.keys())


def test_registry_capacity():
    reg = PatchRegistry()
    for k in range(REGISTRY_CAPACITY):
        reg.install(dummy(k))
    with pytest.raises(RegistryError, match="registry full, max 64"):
        reg.install(dummy(99))


def test_registry_errors():
    reg = PatchRegistry()
    reg.install(dummy(1), 0)
    with pytest.raises(RegistryError, match="duplicate key"):
        reg.install(dummy(1), 0)
    for op in (reg.enable, reg.disable, reg.remove):
        with pytest.raises(RegistryError, match="unknown key"):
            op((2, 0))
    reg.remove((1, 0))
    assert len(reg) == 0


@given(st.lists(st.integers(0, 40), min_size=1, max_size=64), st.integers(0, 40))
def test_lookup_probes_bounded(sites, probe):
    reg = PatchRegistry()
    for s in sites:
        reg.install(dummy(s))
    entries, probes = reg.lookup(probe)
    assert [e.hotpatch.site_id for e in entries] == [probe] * sites.count(probe)
    assert probes <= math.ceil(math.log2(len(sites))) + 1


# dispatch


def test_empty_registry_dispatch(fixture_a):
    inst, _ = instrument_module(fixture_a.vulnerable)
    interp = Interpreter(inst)
    f = inst.functions[0]
    _, env = interpret(inst, f.name, [[[1]], [0]])
    assert interp.dispatch(0, Frame(f, {}), env) is PASS
    assert env.hotpatch_runs == 0


def _loop_header_dispatch(fixture_a, nbytes):
    b = build(fixture_a)
    hp = b.results[0].hotpatch
    assert b.results[0].site.kind == "loop_header"
    reg = PatchRegistry()
    reg.install(hp)
    mem = Memory()
    values = {"bytes": mem.allocate("stack:bytes", [nbytes])}
    f = b.instrumented.function(fixture_a.function)
    env = ExecEnv(memory=mem)
    return Interpreter(b.instrumented, reg).dispatch(hp.site_id, Frame(f, values), env)


def test_dispatch_drop_when_bytes_over_limit(fixture_a):
    action = _loop_header_dispatch(fixture_a, 5)
    assert action == PatchAction(Op.DROP, -22)


def test_dispatch_pass_when_bytes_under_limit(fixture_a):
    assert _loop_header_dispatch(fixture_a, 2) is PASS


def test_disable_then_trigger(fixture_a):
    b = build(fixture_a)
    reg = b.registry()
    exploit = [[[129, 129, 129, 129, 129, 1]], [0]]
    assert interpret(b.instrumented, fixture_a.function, exploit, reg)[0] == -22
    for key in reg.keys():
        reg.disable(key)
    value, env = interpret(b.instrumented, fixture_a.function, [[[129, 129, 129, 129, 129, 1]], [0]], reg)
    assert value == 0 and env.actions == []


CALLER = """
fn caller(%cur_p: ptr, %length: ptr) {
entry:
  %r = call packet_length_decode(%cur_p, %length)
  ret %r
}
"""


def test_drop_in_callee_seen_by_caller(fixture_a):
    vuln = parse_module(print_module(fixture_a.vulnerable) + CALLER)
    patched = parse_module(print_module(fixture_a.patched) + CALLER)
    inst, report = instrument_module(vuln)
    fn = fixture_a.function
    reg = PatchRegistry()
    for r in analyze_all(inst.function(fn), patched.function(fn), fixture_a.specs, report.sites):
        reg.install(r.hotpatch)
    exploit = lambda: [[[129, 129, 129, 129, 129, 1]], [0]]  # noqa: E731
    want = interpret(patched, "caller", exploit())[0]
    got, env = interpret(inst, "caller", exploit(), reg)
    assert want == got == -22
    assert [a.op for _, a in env.actions] == [Op.DROP]


def test_redirect_to_cleanup():
    fx = load_fixture("multi_fragment")
    b = build(fx)
    reg = b.registry()
    # type ok, length over the limit: the copy is skipped and cleanup still runs
    value, env = interpret(b.instrumented, fx.function, [[1, 9], [0, 0]], reg)
    assert value == 0
    assert [(s, a.op, a.target) for s, a in env.actions] == [(0, Op.REDIRECT, "cleanup")]
    assert env.observable_trace() == [("arg1", 1, 1)]


def test_apply_action():
    f = parse_function("fn f() {\nentry:\n  br done\ndone:\n  ret 0\n}")
    frame = Frame(f, {})
    assert apply_action(PASS, frame) == ("next",)
    assert apply_action(PatchAction(Op.DROP, -22), frame) == ("return", -22)
    assert apply_action(PatchAction(Op.REDIRECT, 0, "done"), frame) == ("jump", "done")
    with pytest.raises(RedirectError):
        apply_action(PatchAction(Op.REDIRECT, 0, "nowhere"), frame)


def test_hotpatch_isolation():
    rogue = parse_function(
        """fn rogue(%frame: ptr) {
entry:
  %p = call frame_get(%frame, "out")
  store 1, %p
  ret 0
}"""
    )
    m = parse_module("fn f(%out: ptr) {\nentry:\n  trampoline 0\n  ret 0\n}")
    reg = PatchRegistry()
    reg.install(Hotpatch("rogue", rogue, "f", 0, ["out"], ActionSpec(Op.DROP, -1)))
    with pytest.raises(IsolationError):
        interpret(m, "f", [[5]], reg)


def test_hotpatch_own_cells_do_not_leak(fixture_a):
    b = build(fixture_a)
    reg = b.registry()
    _, env = interpret(b.instrumented, fixture_a.function, [[[1]], [0]], reg)
    assert env.hotpatch_runs == 2
    assert not any(r.startswith("hp:") for r, _, _ in env.trace)


def test_seq_order_first_non_pass_wins():
    drop = parse_function(
        """fn d(%frame: ptr) {
entry:
  %x = call frame_set(%frame, "ret_code", -5)
  ret 1
}"""
    )
    m = parse_module("fn f() {\nentry:\n  trampoline 0\n  ret 0\n}")
    reg = PatchRegistry()
    reg.install(Hotpatch("p0", PASS_BODY, "f", 0, [], ActionSpec(Op.DROP, -1)))
    reg.install(Hotpatch("d1", drop, "f", 0, [], ActionSpec(Op.DROP, -5)))
    reg.install(Hotpatch("d2", drop, "f", 0, [], ActionSpec(Op.DROP, -6)))
    value, env = interpret(m, "f", [], reg)
    assert value == -5 and env.hotpatch_runs == 2


def test_frame_marshal_failure():
    m = parse_module("fn f() {\nentry:\n  trampoline 0\n  ret 0\n}")
    reg = PatchRegistry()
    reg.install(Hotpatch("hp", PASS_BODY, "f", 0, ["missing"], ActionSpec(Op.DROP, -1)))
    with pytest.raises(ExecError, match="frame marshal failure"):
        interpret(m, "f", [], reg)


def test_deterministic(fixture_a):
    b = build(fixture_a)
    runs = [interpret(b.instrumented, fixture_a.function, [[[200, 7]], [0]], b.registry()) for _ in range(2)]
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].to_json() == runs[1][1].to_json()
