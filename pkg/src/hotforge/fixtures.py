"""The built-in corpus of (vulnerable, patched) pairs and their input domains.

Each corpus entry is a directory holding ``vulnerable.ir``, ``patched.ir``
and ``fixture.json``. Argument domains in ``fixture.json`` take one of
these forms:

``{"values": [...]}``
    one of the listed integers
``{"range": [lo, hi]}``
    every integer in the closed interval
``{"cells": [[...], [...]]}``
    a memory buffer; cell ``i`` ranges over the ``i``-th list
``{"buffer": {"alphabet": [...], "len": [lo, hi]}}``
    every buffer of the given lengths over the alphabet

Any of them may add ``"indirect": true`` to pass a pointer to a cell that
holds the pointer to the buffer.
"""
from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

from hotforge.analyze import PatchSpec
from hotforge.ir import IrModule, check, parse_module


@dataclass
class FixturePair:
    tag: str
    cve_id: str
    function: str
    vulnerable: IrModule
    patched: IrModule
    specs: list[PatchSpec]
    domain: dict
    random_domain: dict
    description: str = ""
    expect: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def fixable(self) -> bool:
        return "error" not in self.expect

    @classmethod
    def load(cls, directory: str | Path) -> "FixturePair":
        d = Path(directory)
        meta = json.loads((d / "fixture.json").read_text())
        vuln = check(parse_module((d / "vulnerable.ir").read_text(), name=f"{meta['tag']}.vulnerable"))
        patched = check(parse_module((d / "patched.ir").read_text(), name=f"{meta['tag']}.patched"))
        specs = [
            PatchSpec.from_text(meta["function"], p["range"], p["action"], meta["cve_id"])
            for p in meta["patches"]
        ]
        return cls(
            meta["tag"],
            meta["cve_id"],
            meta["function"],
            vuln,
            patched,
            specs,
            meta["domain"],
            meta.get("random", meta["domain"]),
            meta.get("description", ""),
            meta.get("expect", {}),
            d,
        )


def corpus_dir() -> Path:
    return Path(str(resources.files("hotforge") / "corpus"))


def load_corpus(root: str | Path | None = None) -> list[FixturePair]:
    root = Path(root) if root is not None else corpus_dir()
    dirs = sorted(p for p in root.iterdir() if (p / "fixture.json").is_file())
    return [FixturePair.load(p) for p in dirs]


def load_fixture(tag: str, root: str | Path | None = None) -> FixturePair:
    root = Path(root) if root is not None else corpus_dir()
    return FixturePair.load(root / tag)


# domains


def _choices(spec: dict) -> list:
    if "values" in spec:
        return list(spec["values"])
    if "range" in spec:
        lo, hi = spec["range"]
        return list(range(lo, hi + 1))
    if "cells" in spec:
        return [list(t) for t in itertools.product(*spec["cells"])]
    if "buffer" in spec:
        b = spec["buffer"]
        lo, hi = b["len"]
        return [list(t) for n in range(lo, hi + 1) for t in itertools.product(b["alphabet"], repeat=n)]
    raise ValueError(f"bad argument domain {spec!r}")


def _wrap(spec: dict, value):
    return [value] if spec.get("indirect") else value


def domain_size(domain: dict) -> int:
    n = 1
    for spec in domain["args"]:
        n *= len(_choices(spec))
    return n


def enumerate_inputs(domain: dict) -> Iterator[list]:
    specs = domain["args"]
    for combo in itertools.product(*(_choices(s) for s in specs)):
        yield [_wrap(s, _copy(v)) for s, v in zip(specs, combo)]


def _sample(spec: dict, rng: random.Random):
    if "values" in spec:
        return rng.choice(spec["values"])
    if "range" in spec:
        return rng.randint(*spec["range"])
    if "cells" in spec:
        return [rng.choice(c) for c in spec["cells"]]
    if "buffer" in spec:
        b = spec["buffer"]
        return [rng.choice(b["alphabet"]) for _ in range(rng.randint(*b["len"]))]
    raise ValueError(f"bad argument domain {spec!r}")


def sample_inputs(domain: dict, n: int, seed: int) -> Iterator[list]:
    rng = random.Random(seed)
    for _ in range(n):
        yield [_wrap(s, _sample(s, rng)) for s in domain["args"]]


def _copy(v):
    return [_copy(x) for x in v] if isinstance(v, list) else v
