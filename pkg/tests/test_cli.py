import json
import subprocess
import sys

import pytest

from hotforge.cli import main
from hotforge.fixtures import corpus_dir

CORPUS = corpus_dir()
C10021 = CORPUS / "cve_2020_10021"
C10062 = CORPUS / "cve_2020_10062"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_instrument_fixture_a(tmp_path, capsys):
    out = tmp_path / "out.ir"
    rep = tmp_path / "rep.json"
    code, text, _ = run(capsys, "instrument", C10062 / "vulnerable.ir", "-o", out, "--report", rep)
    assert code == 0
    assert out.read_text().count("trampoline ") == 3
    report = json.loads(rep.read_text())
    assert [s["kind"] for s in report["sites"]] == ["entrance", "loop_header", "loop_exit"]
    assert "3 trampolines" in text


def _analyze_10021(tmp_path, capsys, vulnerable=C10021 / "vulnerable.ir"):
    bundle = tmp_path / "p.bundle"
    code, out, err = run(
        capsys, "--format", "json", "analyze",
        "--vulnerable", vulnerable, "--patched", C10021 / "patched.ir",
        "--fn", "infoTransfer", "--patch-at", "entry:13..entry:16", "--action", "drop:0",
        "--cve", "CVE-2020-10021", "-o", bundle, "--trace", tmp_path / "t.json",
    )
    assert code == 0, err
    return bundle, json.loads(out)


def test_analyze_binds_entrance(tmp_path, capsys):
    bundle, res = _analyze_10021(tmp_path, capsys)
    assert res[0]["site"]["kind"] == "entrance"
    assert res[0]["exprs"] == ["(((CB2<<24)|(CB3<<16)|(CB4<<8)|(CB5<<0)) * BLOCK_SIZE) >= memory_size"]
    trace = json.loads((tmp_path / "t.json").read_text())
    assert trace[0]["skipped"] == 1
    assert bundle.exists()


def test_analyze_accepts_instrumented_input(tmp_path, capsys):
    inst = tmp_path / "fw.ir"
    run(capsys, "instrument", C10021 / "vulnerable.ir", "-o", inst)
    a, _ = _analyze_10021(tmp_path, capsys)
    first = a.read_bytes()
    b, _ = _analyze_10021(tmp_path, capsys, vulnerable=inst)
    assert b.read_bytes() == first


def test_analyze_multiple_bundles(tmp_path, capsys):
    code, out, _ = run(
        capsys, "analyze", "--vulnerable", C10062 / "vulnerable.ir", "--patched", C10062 / "patched.ir",
        "--fn", "packet_length_decode",
        "--patch-at", "do.body:0..do.body:3", "--action", "drop:-22",
        "--patch-at", "do.end:0..do.end:3", "--action", "drop:-22",
        "--cve", "CVE-2020-10062", "-o", tmp_path / "p.bundle",
    )
    assert code == 0
    assert sorted(p.name for p in tmp_path.glob("*.bundle")) == ["p_0.bundle", "p_1.bundle"]
    assert "loop_header" in out and "loop_exit" in out


def test_run_with_bundle_drops_exploit(tmp_path, capsys):
    bundle, _ = _analyze_10021(tmp_path, capsys)
    exploit = "[0,0,0,0,0,5,0,0],0,[0]"
    # oracle: the patched module on the same input
    code_p, out_p, _ = run(capsys, "--format", "json", "run", C10021 / "patched.ir", "--entry", "infoTransfer", "--args", exploit)
    code_h, out_h, _ = run(
        capsys, "--format", "json", "run", C10021 / "vulnerable.ir", "--entry", "infoTransfer",
        "--args", exploit, "--install", bundle, "--trace", tmp_path / "tr.json",
    )
    assert json.loads(out_p)["return"] == json.loads(out_h)["return"] == 0
    assert json.loads(out_h)["actions"][0]["op"] == "DROP"
    trace = json.loads((tmp_path / "tr.json").read_text())
    assert trace["trampoline_hits"] == [0]
    assert trace["dispatch_comparisons"] == [{"site": 0, "comparisons": 1}]
    # benign input passes and returns 1
    code, out, _ = run(capsys, "run", C10021 / "vulnerable.ir", "--entry", "infoTransfer",
                       "--args", "[0,0,0,0,0,0,0,0],256,[0]", "--install", bundle)
    assert code == 1 and "actions: none" in out


def test_run_exit_code_low_byte(tmp_path, capsys):
    src = tmp_path / "m.ir"
    src.write_text("fn main(%a: i32) {\nentry:\n  ret %a\n}\n")
    assert run(capsys, "run", src, "--entry", "main", "--args", "258")[0] == 2
    assert run(capsys, "run", src, "--entry", "main", "--args", "-22")[0] == (-22) & 0xFF


def test_run_step_limit(tmp_path, capsys):
    src = tmp_path / "spin.ir"
    src.write_text("fn spin() {\nentry:\n  br entry\n}\n")
    code, _, err = run(capsys, "run", src, "--entry", "spin", "--max-steps", "100")
    assert code == 1 and "possible nontermination" in err


def test_diff(capsys):
    code, out, err = run(capsys, "diff", C10062 / "vulnerable.ir", C10062 / "patched.ir", "--fn", "packet_length_decode")
    assert code == 0
    assert out.split() == ["do.body:0..do.body:3", "do.end:0..do.end:3"]
    assert "non-contiguous patch" in err


def test_diff_missing_function(capsys):
    code, _, err = run(capsys, "diff", C10062 / "vulnerable.ir", C10062 / "patched.ir", "--fn", "nope")
    assert code == 1 and "missing" in err


def test_verify(capsys):
    code, out, _ = run(capsys, "--format", "json", "verify", "cve_2020_10021", "struct_edit")
    reports = {r["tag"]: r for r in json.loads(out)}
    assert code == 0
    assert reports["cve_2020_10021"]["status"] == "pass"
    assert reports["struct_edit"]["reason"] == "cannot fix: unsupported patch class"


def test_verify_random_prints_seed(capsys):
    code, out, _ = run(capsys, "verify", "int_overflow", "--mode", "random", "--samples", "20", "--seed", "99")
    assert code == 0 and "seed=99" in out and "cases=20" in out


def test_bench_json(tmp_path, capsys):
    out_file = tmp_path / "bench.json"
    code, out, _ = run(capsys, "bench", "cve_2020_10021", "--seed", "5", "-o", out_file)
    assert code == 0
    report = json.loads(out_file.read_text())
    assert report["seed"] == 5 and report["fixtures"][0]["tag"] == "cve_2020_10021"
    assert "dispatch comparisons" in out


def test_bundle_verify(tmp_path, capsys):
    bundle, _ = _analyze_10021(tmp_path, capsys)
    assert run(capsys, "bundle", "verify", bundle)[0] == 0
    data = bytearray(bundle.read_bytes())
    data[100] ^= 1
    bundle.write_bytes(bytes(data))
    code, _, err = run(capsys, "bundle", "verify", bundle)
    assert code == 1 and "bundle integrity failure" in err


def test_bad_input_file(tmp_path, capsys):
    code, _, err = run(capsys, "instrument", tmp_path / "missing.ir", "-o", tmp_path / "x.ir")
    assert code == 1 and err.startswith("hotforge: error:")


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hotforge.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("instrument", "analyze", "run", "diff", "verify", "bench", "bundle"):
        assert sub in proc.stdout
