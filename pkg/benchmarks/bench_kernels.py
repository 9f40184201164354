"""Time the numba and numpy retrieval kernels on the same inputs.

    python benchmarks/bench_kernels.py --wells 4000 --queries 512 --repeat 5
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from morphoeval import _kernels


def make_inputs(n_wells: int, n_queries: int, dim: int, seed: int):
    rng = np.random.default_rng(seed)
    X = _kernels.unit_rows(rng.normal(size=(n_wells, dim)))
    rows = np.arange(n_queries)
    sims = X[rows] @ X.T
    meta = dict(
        pert=rng.integers(0, n_wells // 8, n_wells),
        batch=rng.integers(0, 12, n_wells),
        source=rng.integers(0, 3, n_wells),
        pos=rng.integers(0, 384, n_wells),
        ctrl=rng.random(n_wells) < 0.1,
    )
    return sims, rows, meta


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--wells", type=int, default=4000)
    parser.add_argument("--queries", type=int, default=512)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--k", type=int, default=40)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    sims, rows, m = make_inputs(args.wells, args.queries, args.dim, args.seed)
    eligible = ~m["ctrl"]
    related = m["pert"] % 7 == 0
    backends = [_kernels.NUMPY] + ([_kernels.NUMBA] if _kernels.NUMBA is not None else [])

    print(f"{args.queries} queries x {args.wells} wells, best of {args.repeat}")
    results = {}
    for be in backends:
        def rank():
            for level in range(4):
                be.rank_block(sims, rows, m["pert"], m["batch"], m["source"], m["pos"], m["ctrl"], level)

        def topk():
            for r in range(sims.shape[0]):
                be.topk_related(sims[r], eligible, related, args.k)

        rank()  # compile and warm caches before timing
        topk()
        results[be.name] = (best_of(rank, args.repeat), best_of(topk, args.repeat))
        print(f"  {be.name:6s} rank_block (4 levels) {results[be.name][0] * 1e3:9.1f} ms"
              f"   topk_related {results[be.name][1] * 1e3:9.1f} ms")
    if len(results) == 2:
        (r0, t0), (r1, t1) = results["numpy"], results["numba"]
        print(f"  numba speedup: rank_block x{r0 / r1:.1f}, topk_related x{t0 / t1:.1f}")
    else:
        print("  numba not installed; only the numpy backend was timed")


if __name__ == "__main__":
    main()
