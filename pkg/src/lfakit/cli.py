"""``lfa`` command line: gen, filter, cluster, split, stats, index, mofe-check.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from lfakit import manifest as mio
from lfakit.clustering import ClusterAssignment, ClusterConfig, canonical_labels, split_identities
from lfakit.constraints import ConstraintConfig
from lfakit.ivfpq import (IndexFormatError, build_index, default_nlist, default_nprobe, load_index,
                          normalize_rows, save_index, search)
from lfakit.mofe import MofeConfig, init_params, mofe_forward, parameter_overhead, random_inputs, gradient_check
from lfakit.pipeline import PipelineConfig, clustering_samples, corpus_stats, run_cluster, run_filter
from lfakit.synth import GenConfig, generate_corpus

logger = logging.getLogger("lfakit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


def _config(factory, **kw):
    try:
        return factory(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump_json(obj, path=None):
    text = json.dumps(mio.as_jsonable(obj), indent=2, sort_keys=False) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# --- subcommands ----------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(GenConfig, identities=args.identities, clips_per=args.clips_per, seed=args.seed,
                  dim=args.dim, sample_stride=args.sample_stride, p_count=args.p_count,
                  p_prop=args.p_prop, p_pose=args.p_pose, p_identity=args.p_identity,
                  p_missing=args.p_missing)
    paths = generate_corpus(cfg).write(args.out)
    logger.info("wrote corpus to %s", args.out)
    _dump_json({k: str(v) for k, v in paths.items()})
    return EXIT_OK


def _pipeline_config(args) -> PipelineConfig:
    constraints = _config(ConstraintConfig, sample_stride=args.sample_stride,
                          min_face_proportion=args.min_face_prop, min_angle_variation=args.min_angle_var)
    kw = {}
    if hasattr(args, "tau_high"):
        kw["clustering"] = _config(ClusterConfig, tau_high=args.tau_high, tau_low=args.tau_low,
                                   knn=args.knn, nprobe=args.nprobe, seed=args.seed)
        kw.update(nlist=args.nlist, m=args.m, granularity=args.granularity)
    return _config(PipelineConfig, constraints=constraints,
                   identity_threshold=getattr(args, "identity_threshold", 0.6), seed=args.seed, **kw)


def _check_distinct(outputs, inputs):
    ins = {Path(p).resolve() for p in inputs if p}
    for p in outputs:
        if p and Path(p).resolve() in ins:
            raise UsageError(f"output path {p} would overwrite an input")


def cmd_filter(args) -> int:
    _check_distinct([args.out], [args.clips, args.faces, args.embeddings])
    cfg = _pipeline_config(args)
    clips = mio.parse_clip_manifest(args.clips)
    faces = mio.parse_face_manifest(args.faces, clips)
    store = mio.load_embedding_store(args.embeddings) if args.embeddings else None
    if store is None:
        logger.warning("no --embeddings given; identity consistency not evaluated")
    decisions = run_filter(clips, faces, store, cfg)
    mio.write_report(decisions, args.out)
    kept = sum(d.accepted for d in decisions)
    logger.info("filter: %d of %d clips accepted", kept, len(decisions))
    return EXIT_OK


def cmd_cluster(args) -> int:
    _check_distinct([args.out, args.save_index], [args.clips, args.faces, args.embeddings, args.report])
    cfg = _pipeline_config(args)
    clips = mio.parse_clip_manifest(args.clips)
    faces = mio.parse_face_manifest(args.faces, clips)
    store = mio.load_embedding_store(args.embeddings)
    report = mio.read_report(args.report)
    known = {c.clip_id for c in clips}
    stray = [d.clip_id for d in report if d.clip_id not in known]
    if stray:
        raise mio.ManifestError(f"report names clips missing from the clip manifest: {stray[:5]}")
    accepted = {d.clip_id for d in report if d.accepted}
    samples = clustering_samples(clips, faces, store, accepted, cfg)
    index, assignment = run_cluster(samples.vectors, cfg)
    recs = []
    for i, (cid, fidx) in enumerate(zip(samples.clip_ids, samples.frame_indices)):
        rec = {"sample_id": i, "cluster_id": int(assignment.labels[i]), "clip_id": cid}
        if fidx is not None:
            rec["frame_index"] = fidx
        recs.append(rec)
    mio.write_jsonl(recs, args.out)
    if args.save_index:
        if index is None:
            raise mio.ManifestError("no accepted samples; nothing to index")
        save_index(index, args.save_index)
    logger.info("cluster: %d samples -> %d clusters", len(recs), assignment.n_clusters)
    return EXIT_OK


def read_clusters(path) -> ClusterAssignment:
    recs = mio.read_jsonl(path)
    ids = [r.get("sample_id") for r in recs]
    if sorted(ids) != list(range(len(recs))):
        raise mio.ManifestError("sample_id values must be exactly 0..N-1", path=path)
    labels = np.empty(len(recs), dtype=np.int64)
    for r in recs:
        labels[r["sample_id"]] = r["cluster_id"]
    return ClusterAssignment(canonical_labels(labels))


def cmd_split(args) -> int:
    _check_distinct([args.out], [args.clusters])
    if not 0 < args.test_frac < 1:
        raise UsageError(f"--test-frac must lie in (0, 1), got {args.test_frac}")
    assignment = read_clusters(args.clusters)
    split = split_identities(assignment, args.test_frac, args.seed)
    _dump_json(split.to_json(), args.out)
    return EXIT_OK


def cmd_stats(args) -> int:
    _check_distinct([args.out], [args.report, args.clusters])
    decisions = mio.read_report(args.report)
    sizes = read_clusters(args.clusters).sizes().tolist() if args.clusters else None
    _dump_json(corpus_stats(decisions, sizes), args.out)
    return EXIT_OK


def cmd_index_build(args) -> int:
    _check_distinct([args.out], [args.embeddings])
    store = normalize_rows(mio.load_embedding_store(args.embeddings))
    nlist = args.nlist if args.nlist is not None else default_nlist(store.rows)
    index = build_index(store, nlist=nlist, m=args.m, seed=args.seed)
    save_index(index, args.out)
    logger.info("index: %d vectors, nlist=%d, m=%d", index.ntotal, index.nlist, index.m)
    return EXIT_OK


def query_records(index, queries: np.ndarray, k: int, nprobe: int) -> list:
    out = []
    for qi, q in enumerate(queries):
        res = search(q, index, k, nprobe)
        out.append({"query": qi, "neighbors": [[i, d] for i, d in res.neighbors]})
    return out


def cmd_index_query(args) -> int:
    _check_distinct([args.out], [args.index, args.queries])
    try:
        index = load_index(args.index)
    except IndexFormatError as exc:
        raise mio.ManifestError(str(exc), path=args.index) from None
    queries = normalize_rows(mio.load_embedding_store(args.queries)).data
    nprobe = args.nprobe if args.nprobe is not None else default_nprobe(index.nlist)
    recs = query_records(index, queries, args.k, nprobe)
    if args.out:
        mio.write_jsonl(recs, args.out)
    else:
        for r in recs:
            sys.stdout.write(json.dumps(r) + "\n")
    return EXIT_OK


def mofe_check(cfg: MofeConfig, seeds: int = 1, base_params: int = 1_300_000_000, n_q: int = 2) -> dict:
    t0 = time.perf_counter()
    grad_err = 0.0
    row_err = 0.0
    for s in range(seeds):
        errs = gradient_check(cfg, seed=cfg.seed + s, n_q=n_q)
        grad_err = max(grad_err, max(errs.values()))
        params = init_params(cfg, cfg.seed + s)
        bundle, inputs = random_inputs(cfg, n_q=n_q, seed=cfg.seed + s + 1)
        fwd = mofe_forward(bundle, inputs, params)
        for act in fwd.blocks.values():
            row_err = max(row_err, float(np.abs(act.w.sum(1) - 1.0).max()))
    acct = parameter_overhead(cfg, base_params)
    return {"grad_max_rel_err": grad_err, "gate_row_sum_err": row_err,
            "blocks_injected": acct["blocks_injected"], "param_ratio": acct["ratio"],
            "mofe_params": acct["mofe_params"], "seeds": seeds,
            "seconds": round(time.perf_counter() - t0, 3),
            "ok": bool(grad_err <= 1e-4 and row_err <= 1e-6)}


def cmd_mofe_check(args) -> int:
    cfg = _config(MofeConfig, d_model=args.d_model, n_tokens=args.n_tokens, d_id=args.d_id,
                  d_sem=args.d_sem, d_det=args.d_det, n_blocks=args.n_blocks,
                  inject_every=args.inject_every, gate_kind=args.gate_kind,
                  gate_granularity=args.gate_granularity, seed=args.seed)
    verdict = mofe_check(cfg, seeds=args.seeds, base_params=args.base_params, n_q=args.n_q)
    _dump_json(verdict, args.out)
    return EXIT_OK if verdict["ok"] else EXIT_DATA


# --- parser ---------------------------------------------------------------

def _add_constraint_flags(p):
    p.add_argument("--sample-stride", type=int, default=3)
    p.add_argument("--min-face-prop", type=float, default=0.10)
    p.add_argument("--min-angle-var", type=float, default=30.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lfa", description="Face-video dataset curation and MoFE checks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic corpus with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=3)
    p.add_argument("--clips-per", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--sample-stride", type=int, default=3)
    for name, default in (("count", 0.1), ("prop", 0.1), ("pose", 0.1), ("identity", 0.1), ("missing", 0.05)):
        p.add_argument(f"--p-{name}", type=float, default=default)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("filter", parents=[common], help="facial constraints + identity consistency")
    p.add_argument("--clips", required=True)
    p.add_argument("--faces", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_constraint_flags(p)
    p.add_argument("--identity-threshold", type=float, default=0.6)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("cluster", parents=[common], help="two-pass identity clustering of accepted clips")
    for flag in ("--clips", "--faces", "--embeddings", "--report", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--save-index")
    p.add_argument("--seed", type=int, default=0)
    _add_constraint_flags(p)
    p.add_argument("--tau-high", type=float, default=0.75)
    p.add_argument("--tau-low", type=float, default=0.50)
    p.add_argument("--knn", type=int, default=16)
    p.add_argument("--nlist", type=int)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--nprobe", type=int)
    p.add_argument("--granularity", choices=("clip", "frame"), default="clip")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("split", parents=[common], help="identity-disjoint train/test split")
    p.add_argument("--clusters", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-frac", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("stats", parents=[common], help="corpus statistics from a filter report")
    p.add_argument("--report", required=True)
    p.add_argument("--clusters")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("index", help="build or query a standalone IVF-PQ index")
    isub = p.add_subparsers(dest="index_command", required=True, parser_class=_Parser)
    b = isub.add_parser("build", parents=[common])
    b.add_argument("--embeddings", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--nlist", type=int)
    b.add_argument("--m", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_index_build)
    q = isub.add_parser("query", parents=[common])
    q.add_argument("--index", required=True)
    q.add_argument("--queries", required=True, help="query vectors in embeddings.bin format")
    q.add_argument("--k", type=int, default=10)
    q.add_argument("--nprobe", type=int)
    q.add_argument("--out")
    q.set_defaults(func=cmd_index_query)

    p = sub.add_parser("mofe-check", parents=[common], help="verify MoFE forward/backward math")
    p.add_argument("--d-model", type=int, default=4)
    p.add_argument("--n-tokens", type=int, default=2)
    p.add_argument("--n-q", type=int, default=2)
    p.add_argument("--d-id", type=int, default=8)
    p.add_argument("--d-sem", type=int, default=8)
    p.add_argument("--d-det", type=int, default=8)
    p.add_argument("--n-blocks", type=int, default=4)
    p.add_argument("--inject-every", type=int, default=2)
    p.add_argument("--gate-kind", choices=("linear", "mlp"), default="linear")
    p.add_argument("--gate-granularity", choices=("token", "pooled"), default="token")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-params", type=int, default=1_300_000_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mofe_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"lfa: error: {exc}\n")
        return EXIT_USAGE
    except (mio.ManifestError, IndexFormatError, OSError, ValueError, KeyError, IndexError) as exc:
        sys.stderr.write(f"lfa: data error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
