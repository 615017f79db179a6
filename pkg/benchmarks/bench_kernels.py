"""Time the compiled mask kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats 200]
"""
import argparse
import timeit

import numpy as np

from subjectdiff.kernels import backends
from subjectdiff.masks import selection_count
from subjectdiff.tensor import Rng


def workloads(seed=0):
    rng = Rng(seed)
    for G, N, gamma in ((8, 2, 0.2), (16, 1, 0.2), (16, 4, 0.2), (32, 4, 0.2), (64, 4, 0.1)):
        maps = rng.uniform((N, G * G)).astype(np.float32)
        counts = np.full(N, selection_count(gamma, G * G), np.int64)
        yield f"G={G:<3d} N={N} gamma={gamma}", maps, counts


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args(argv)
    impls = backends()
    names = sorted(impls)
    print(f"{'workload':<24}" + "".join(f"{n + ' alloc us':>18}{n + ' topk us':>17}" for n in names))
    for label, maps, counts in workloads():
        ref = None
        row = f"{label:<24}"
        for name in names:
            mod = impls[name]
            owner = mod.allocate_subjects(maps, counts)
            if ref is None:
                ref = owner
            elif not np.array_equal(owner, ref):
                raise SystemExit(f"backends disagree on {label}")
            t_alloc = min(timeit.repeat(lambda: mod.allocate_subjects(maps, counts), number=args.repeats, repeat=3))
            t_topk = min(timeit.repeat(lambda: mod.topk_order(maps[0], int(counts[0])), number=args.repeats,
                                       repeat=3))
            row += f"{1e6 * t_alloc / args.repeats:18.1f}{1e6 * t_topk / args.repeats:17.1f}"
        print(row)


if __name__ == "__main__":
    main()
