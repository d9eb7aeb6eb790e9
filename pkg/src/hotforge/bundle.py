"""Patch bundles: a canonical JSON encoding of a hotpatch with a SHA-256 checksum.

The checksum covers the compact JSON of every other field in the fixed key
order, so any byte change in a bundle is detected either by the checksum
or by the canonical-form check in ``unpack``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from hotforge.hotpatch import ActionSpec, Hotpatch, Op
from hotforge.instrument import InstrumentReport
from hotforge.ir import IrModule, ParseError, parse_module, validate

VERSION = 1
FIELDS = (
    "version",
    "cve_id",
    "target_fn",
    "site_id",
    "required_vars",
    "action_encoding",
    "hotpatch_ir",
    "checksum",
)
ACTION_FIELDS = ("op", "op_code", "ret_code", "target", "target_index")


class BundleError(Exception):
    pass


class IntegrityError(BundleError):
    def __init__(self, detail: str = ""):
        super().__init__("bundle integrity failure" + (f": {detail}" if detail else ""))


class VersionError(BundleError):
    pass


class SiteMismatch(BundleError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def checksum(fields: dict) -> str:
    body = {k: fields[k] for k in FIELDS[:-1]}
    return hashlib.sha256(_dumps(body).encode("utf-8")).hexdigest()


def pack(h: Hotpatch) -> bytes:
    fields = {
        "version": VERSION,
        "cve_id": h.cve_id,
        "target_fn": h.target_fn,
        "site_id": h.site_id,
        "required_vars": list(h.required_vars),
        "action_encoding": {k: h.action_encoding[k] for k in ACTION_FIELDS},
        "hotpatch_ir": h.ir_text(),
    }
    fields["checksum"] = checksum(fields)
    return _dumps(fields).encode("utf-8")


def unpack(data: bytes) -> Hotpatch:
    try:
        text = data.decode("utf-8")
        fields = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"not a JSON bundle ({e})") from None
    if not isinstance(fields, dict) or tuple(fields) != FIELDS:
        raise IntegrityError("unexpected field layout")
    if _dumps(fields) != text:
        raise IntegrityError("not in canonical form")
    if fields["checksum"] != checksum(fields):
        raise IntegrityError("checksum mismatch")
    if fields["version"] != VERSION:
        raise VersionError(f"unknown bundle version {fields['version']!r}")
    enc = fields["action_encoding"]
    if not isinstance(enc, dict) or tuple(enc) != ACTION_FIELDS:
        raise BundleError("malformed action encoding")
    try:
        m = parse_module(fields["hotpatch_ir"], name="bundle")
    except ParseError as e:
        raise BundleError(f"hotpatch IR does not parse: {e}") from None
    problems = validate(m)
    if problems or len(m.functions) != 1:
        raise BundleError("hotpatch IR does not validate: " + "; ".join(map(str, problems)))
    op = Op[enc["op"]]
    if int(op) != enc["op_code"]:
        raise BundleError("action op and op_code disagree")
    action = ActionSpec(op, enc["ret_code"], enc["target"])
    body = m.functions[0]
    return Hotpatch(
        body.name,
        body,
        fields["target_fn"],
        fields["site_id"],
        list(fields["required_vars"]),
        action,
        enc["target_index"],
        fields["cve_id"],
    )


def check_site(h: Hotpatch, module: IrModule, report: InstrumentReport) -> None:
    """Install-time binding check against an instrumented module."""
    if not module.has_function(h.target_fn):
        raise SiteMismatch(f"target function {h.target_fn!r} is not in the module")
    sites = {s.site_id for s in report.for_function(h.target_fn)}
    if h.site_id not in sites:
        raise SiteMismatch(f"site {h.site_id} is not a trampoline of {h.target_fn}")
    if h.action.op is Op.REDIRECT:
        labels = module.function(h.target_fn).labels()
        idx = h.target_index
        if idx is None or not 0 <= idx < len(labels) or labels[idx] != h.action.target:
            raise SiteMismatch(f"redirect target {h.action.target!r} does not match {h.target_fn}")


def write_bundle(h: Hotpatch, path: str | Path) -> int:
    data = pack(h)
    Path(path).write_bytes(data)
    return len(data)


def read_bundle(path: str | Path) -> Hotpatch:
    return unpack(Path(path).read_bytes())


def verify_bundle(data: bytes) -> dict:
    """Summary of a bundle that passed every integrity check."""
    h = unpack(data)
    return {
        "ok": True,
        "cve_id": h.cve_id,
        "target_fn": h.target_fn,
        "site_id": h.site_id,
        "hotpatch": h.name,
        "required_vars": h.required_vars,
        "action": str(h.action),
        "bytes": len(data),
        "instructions": h.instruction_count(),
    }
