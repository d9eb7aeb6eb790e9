"""Exhaustive and seeded random equivalence checks over every corpus fixture,
plus the empty-registry transparency check.

    python3 scripts/verify_corpus.py [--samples 1000] [--seed N]
"""
import argparse
import sys
import time

from hotforge import harness
from hotforge.fixtures import domain_size, load_corpus


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=harness.RANDOM_SAMPLES)
    p.add_argument("--seed", type=lambda x: int(x, 0), default=None)
    p.add_argument("--corpus", default=None)
    args = p.parse_args()
    seed = harness.default_seed() if args.seed is None else args.seed

    failed = 0
    t0 = time.perf_counter()
    for fx in load_corpus(args.corpus):
        for mode in ("exhaustive", "random"):
            r = harness.verify(fx, mode, args.samples, seed)
            failed += r.status == "fail"
            print(r.line())
            if r.counterexample:
                print(f"    counterexample: {r.counterexample}")
        t = harness.transparency(fx, args.samples, seed)
        ok = t["mismatches"] == 0 and t["overhead_is_k_per_hit"]
        failed += not ok
        print(f"{fx.tag:<16} transparency mismatches={t['mismatches']} k={t['observed_k']} domain={domain_size(fx.domain)}")
    print(f"done in {time.perf_counter() - t0:.2f}s, {failed} failure(s)")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
