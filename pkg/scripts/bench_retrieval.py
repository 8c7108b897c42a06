#!/usr/bin/env python3
"""Time the exact scan against IVF probing on a clustered bank.

Prints per-query latency, recall@k vs the exact scan, and speedup for each
nprobe. Mixture data keeps the benchmark honest: real caption banks are
clumpy, and uniform random data would make IVF look artificially bad.
"""

import argparse
import time

import numpy as np

from retroclass.bank import EmbeddingBank
from retroclass.index import (QueryEmbedding, build_ivf, exact_topk,
                              ivf_search, recall_at_k)


def mixture(rng, n_rows, dim, n_centers, spread):
    centers = rng.standard_normal((n_centers, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    ids = rng.integers(0, n_centers, n_rows)
    rows = centers[ids] + (spread / np.sqrt(dim)) * \
        rng.standard_normal((n_rows, dim))
    return centers, rows


def timed(fn, queries, repeats=2):
    fn(queries[0])  # warmup
    t0 = time.perf_counter()
    for _ in range(repeats):
        for q in queries:
            fn(q)
    return (time.perf_counter() - t0) / (repeats * len(queries))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--clusters", type=int, default=256)
    ap.add_argument("--n-queries", type=int, default=20)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--nprobes", default="1,2,4,8,16,32",
                    type=lambda s: tuple(int(t) for t in s.split(",")))
    ap.add_argument("--spread", type=float, default=0.7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    centers, rows = mixture(rng, args.rows, args.dim, args.clusters,
                            args.spread)
    bank = EmbeddingBank.from_matrix(rows, "llm-text")
    del rows

    t0 = time.perf_counter()
    index = build_ivf(bank, args.clusters, seed=args.seed)
    build_s = time.perf_counter() - t0

    qmat = centers[rng.integers(0, args.clusters, args.n_queries)] + \
        (args.spread / np.sqrt(args.dim)) * \
        rng.standard_normal((args.n_queries, args.dim))
    queries = [QueryEmbedding.from_raw(q, "llm-text") for q in qmat]
    truth = [exact_topk(q, bank, args.k) for q in queries]

    exact_ms = timed(lambda q: exact_topk(q, bank, args.k), queries) * 1e3
    print(f"bank {args.rows}x{args.dim}, {args.clusters} clusters "
          f"(built in {build_s:.1f}s), k={args.k}, "
          f"{args.n_queries} queries")
    print(f"{'probe':<10} {'ms/query':>9} {'recall':>7} {'speedup':>8}")
    print(f"{'exact':<10} {exact_ms:>9.2f} {1.0:>7.3f} {'1.0x':>8}")
    for nprobe in args.nprobes:
        if nprobe > args.clusters:
            continue
        ms = timed(lambda q: ivf_search(index, q, args.k, nprobe),
                   queries) * 1e3
        rec = float(np.mean([recall_at_k(ivf_search(index, q, args.k, nprobe),
                                         truth[i])
                             for i, q in enumerate(queries)]))
        label = f"nprobe={nprobe}"
        print(f"{label:<10} {ms:>9.2f} {rec:>7.3f} {exact_ms / ms:>7.1f}x")


if __name__ == "__main__":
    main()
