"""Command-line front end: ``hotforge <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from hotforge import bundle, harness
from hotforge.analyze import AnalysisError, PatchSpec, analyze_all
from hotforge.fixtures import load_corpus, load_fixture
from hotforge.instrument import InstrumentError, ensure_instrumented, instrument_module
from hotforge.ir import IrreducibleCFG, ParseError, ValidationError, check, parse_module, print_module
from hotforge.runtime import DEFAULT_MAX_STEPS, ExecError, Interpreter, PatchRegistry, RegistryError
from hotforge.values import render


class CliError(Exception):
    pass


def _load(path: str):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror}") from None
    return check(parse_module(text, name=Path(path).stem))


def _emit(args, data, text: str) -> None:
    if args.format == "json":
        print(json.dumps(data, indent=2, sort_keys=False))
    else:
        print(text)


def cmd_instrument(args) -> int:
    m = _load(args.input)
    out, report = instrument_module(m)
    Path(args.output).write_text(print_module(out))
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=2) + "\n")
    counts = ", ".join(f"{k}={v}" for k, v in report.counts.items() if v)
    _emit(args, report.to_json(), f"{len(report.sites)} trampolines ({counts}) -> {args.output}")
    return 0


def _bundle_paths(output: str, n: int) -> list[Path]:
    out = Path(output)
    if n == 1:
        return [out]
    return [out.with_name(f"{out.stem}_{k}{out.suffix}") for k in range(n)]


def cmd_analyze(args) -> int:
    vuln, patched = _load(args.vulnerable), _load(args.patched)
    if len(args.patch_at) != len(args.action):
        raise CliError("give one --action per --patch-at")
    inst, report = ensure_instrumented(vuln)
    if not inst.has_function(args.fn) or not patched.has_function(args.fn):
        raise CliError(f"function {args.fn!r} missing from the inputs")
    specs = [PatchSpec.from_text(args.fn, r, a, args.cve) for r, a in zip(args.patch_at, args.action)]
    results = analyze_all(inst.function(args.fn), patched.function(args.fn), specs, report.sites)
    written = []
    for r, path in zip(results, _bundle_paths(args.output, len(results))):
        size = bundle.write_bundle(r.hotpatch, path)
        written.append({"bundle": str(path), "bytes": size, **r.to_json()})
    if args.trace:
        Path(args.trace).write_text(json.dumps([w["trace"] for w in written], indent=2) + "\n")
    lines = [
        f"{w['bundle']}: {w['hotpatch']} at site {w['site']['id']} ({w['site']['kind']}, "
        f"{w['scenario']}), {w['bytes']} bytes\n  guard: {w['exprs'][0]}"
        for w in written
    ]
    _emit(args, written, "\n".join(lines))
    return 0


def _parse_args(text: str) -> list:
    if not text:
        return []
    try:
        value = json.loads(f"[{text}]")
    except json.JSONDecodeError:
        raise CliError(f"bad --args {text!r}; use comma-separated integers and [lists]") from None
    return value


def cmd_run(args) -> int:
    m = _load(args.input)
    registry = PatchRegistry()
    if args.install:
        m, report = ensure_instrumented(m)
        for path in args.install:
            h = bundle.read_bundle(path)
            bundle.check_site(h, m, report)
            registry.install(h)
    interp = Interpreter(m, registry, max_steps=args.max_steps)
    try:
        result = interp.run(args.entry, _parse_args(args.args))
    except ExecError as e:
        if args.trace and e.env is not None:
            Path(args.trace).write_text(json.dumps({"error": e.kind, **e.env.to_json()}, indent=2) + "\n")
        raise
    env = result.env
    if args.trace:
        Path(args.trace).write_text(json.dumps({"return": render(result.value), **env.to_json()}, indent=2) + "\n")
    summary = {
        "return": render(result.value),
        "steps": env.steps,
        "trampoline_hits": len(env.hits),
        "actions": [{"site": s, **a.to_json()} for s, a in env.actions],
    }
    acts = ", ".join(f"{a['op']}@{a['site']}" for a in summary["actions"]) or "none"
    _emit(args, summary, f"returned {summary['return']} in {env.steps} steps; actions: {acts}")
    value = result.value if isinstance(result.value, int) else 0
    return value & 0xFF


def cmd_diff(args) -> int:
    vuln, patched = _load(args.vulnerable), _load(args.patched)
    if not vuln.has_function(args.fn) or not patched.has_function(args.fn):
        raise CliError(f"function {args.fn!r} missing from the inputs")
    res = harness.diff_functions(vuln.function(args.fn), patched.function(args.fn))
    text = "\n".join(res.ranges) if res.ranges else "(no inserted instructions)"
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _emit(args, res.to_json(), text)
    return 0


def _fixtures(args):
    if args.fixtures:
        return [load_fixture(t, args.corpus) for t in args.fixtures]
    return load_corpus(args.corpus)


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else harness.default_seed()
    reports = [harness.verify(fx, args.mode, args.samples, seed) for fx in _fixtures(args)]
    reports.sort(key=lambda r: r.tag)
    _emit(args, [r.to_json() for r in reports], "\n".join(r.line() for r in reports))
    return 0 if all(r.status != "fail" for r in reports) else 1


def cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else harness.default_seed()
    report = harness.bench(_fixtures(args), seed)
    if args.output:
        Path(args.output).write_text(json.dumps(report, indent=2) + "\n")
    _emit(args, report, harness.bench_table(report))
    return 0


def cmd_bundle_verify(args) -> int:
    info = bundle.verify_bundle(Path(args.file).read_bytes())
    _emit(args, info, f"ok: {info['hotpatch']} for {info['target_fn']} at site {info['site_id']} ({info['bytes']} bytes)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hotforge", description=__doc__)
    p.add_argument("--format", choices=("text", "json"), default="text")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("instrument", help="insert trampolines")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_instrument)

    s = sub.add_parser("analyze", help="turn an official patch into hotpatch bundles")
    s.add_argument("--vulnerable", required=True)
    s.add_argument("--patched", required=True)
    s.add_argument("--fn", required=True)
    s.add_argument("--patch-at", action="append", required=True, metavar="BLOCK:IDX..BLOCK:IDX")
    s.add_argument("--action", action="append", required=True, metavar="drop:CODE|redirect:LABEL")
    s.add_argument("--cve", default="")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("run", help="interpret a module")
    s.add_argument("input")
    s.add_argument("--entry", required=True)
    s.add_argument("--args", default="")
    s.add_argument("--install", action="append", default=[])
    s.add_argument("--trace")
    s.add_argument("--max-steps", type=int, default=DEFAULT_MAX_STEPS)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("diff", help="suggest patch ranges")
    s.add_argument("vulnerable")
    s.add_argument("patched")
    s.add_argument("--fn", required=True)
    s.set_defaults(func=cmd_diff)

    for name, func, help_ in (
        ("verify", cmd_verify, "check hotpatched vulnerable code against the patched code"),
        ("bench", cmd_bench, "overhead measurements over the corpus"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("fixtures", nargs="*")
        s.add_argument("--corpus")
        s.add_argument("--seed", type=lambda x: int(x, 0))
        s.set_defaults(func=func)
        if name == "verify":
            s.add_argument("--mode", choices=("exhaustive", "random"), default="exhaustive")
            s.add_argument("--samples", type=int, default=harness.RANDOM_SAMPLES)
        else:
            s.add_argument("-o", "--output")

    s = sub.add_parser("bundle", help="bundle utilities")
    bsub = s.add_subparsers(dest="bundle_command", required=True)
    v = bsub.add_parser("verify")
    v.add_argument("file")
    v.set_defaults(func=cmd_bundle_verify)
    return p


ERRORS = (
    CliError,
    AnalysisError,
    bundle.BundleError,
    ExecError,
    InstrumentError,
    IrreducibleCFG,
    ParseError,
    RegistryError,
    ValidationError,
    ValueError,
    OSError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ERRORS as e:
        print(f"hotforge: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
