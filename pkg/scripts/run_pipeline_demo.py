"""End-to-end curation run on a synthetic corpus through the CLI:
gen -> filter -> cluster -> split -> stats, then a check against the
generator's planted truth."""
import argparse
import json
from pathlib import Path

from lfakit.cli import main as lfa


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--identities", type=int, default=20)
    ap.add_argument("--clips-per", type=int, default=20)
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    corpus = out / "corpus"
    src = ["--clips", str(corpus / "clips.jsonl"), "--faces", str(corpus / "faces.jsonl"),
           "--embeddings", str(corpus / "embeddings.bin")]
    steps = [
        ["gen", "--out", str(corpus), "--identities", str(args.identities),
         "--clips-per", str(args.clips_per), "--dim", str(args.dim), "--seed", str(args.seed)],
        ["filter", *src, "--out", str(out / "report.jsonl")],
        ["cluster", *src, "--report", str(out / "report.jsonl"), "--out", str(out / "clusters.jsonl"),
         "--save-index", str(out / "index.bin"), "--seed", str(args.seed)],
        ["split", "--clusters", str(out / "clusters.jsonl"), "--out", str(out / "split.json"),
         "--seed", str(args.seed)],
        ["stats", "--report", str(out / "report.jsonl"), "--clusters", str(out / "clusters.jsonl"),
         "--out", str(out / "stats.json")],
    ]
    for argv in steps:
        code = lfa(argv)
        if code:
            raise SystemExit(f"step {argv[0]} exited {code}")

    truth = {json.loads(x)["clip_id"]: json.loads(x) for x in (corpus / "truth.jsonl").read_text().splitlines()}
    report = [json.loads(x) for x in (out / "report.jsonl").read_text().splitlines()]
    agree = sum(r["accepted"] == truth[r["clip_id"]]["accepted"] for r in report)
    stats = json.loads((out / "stats.json").read_text())
    print(json.dumps({"filter_agreement": f"{agree}/{len(report)}", "clips_kept": stats["n_clips_out"],
                      "clusters": stats["n_clusters"], "identities": args.identities}, indent=2))


if __name__ == "__main__":
    main()
