"""Recall@k of the IVF-PQ index against brute force, swept over nprobe.

    python scripts/run_recall_benchmark.py --groups 1000 --per-group 10
"""
import argparse
import json
import time

import numpy as np

from lfakit.ivfpq import build_index, search
from lfakit.synth import clustered_vectors


def exact_topk(x, q, k):
    x, q = x.astype(np.float64), q.astype(np.float64)
    d = (q * q).sum(1)[:, None] - 2 * q @ x.T + (x * x).sum(1)[None, :]
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--groups", type=int, default=1000)
    ap.add_argument("--per-group", type=int, default=10)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--spread", type=float, default=0.5)
    ap.add_argument("--queries", type=int, default=1000)
    ap.add_argument("--nlist", type=int, default=64)
    ap.add_argument("--m", type=int, default=8)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    x, _, q, _ = clustered_vectors(args.groups, args.per_group, args.dim, args.spread,
                                   seed=args.seed, n_queries=args.queries)
    t0 = time.perf_counter()
    index = build_index(x, nlist=args.nlist, m=args.m, seed=args.seed)
    build_s = time.perf_counter() - t0
    truth = exact_topk(x, q, args.k)
    rows = []
    nprobe = 1
    while nprobe <= args.nlist:
        t0 = time.perf_counter()
        found = [search(v, index, args.k, nprobe).ids for v in q]
        secs = time.perf_counter() - t0
        hits = sum(len(set(f.tolist()) & set(t.tolist())) for f, t in zip(found, truth))
        rows.append({"nprobe": nprobe, "recall": hits / (args.k * len(q)), "query_s": round(secs, 3)})
        nprobe *= 2
    print(json.dumps({"n": len(x), "build_s": round(build_s, 2), "sweep": rows}, indent=2))


if __name__ == "__main__":
    main()
