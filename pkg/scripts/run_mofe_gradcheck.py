"""Finite-difference check of the MoFE backward pass over a grid of sizes,
gate kinds and seeds. Prints the worst relative error per setting."""
import argparse
import itertools
import json

from lfakit.mofe import MofeConfig, gradient_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--d-model", type=int, nargs="+", default=[4, 8])
    ap.add_argument("--n-tokens", type=int, nargs="+", default=[2, 4])
    ap.add_argument("--h", type=float, default=1e-5)
    args = ap.parse_args()

    worst = 0.0
    for d, t, kind, gran in itertools.product(args.d_model, args.n_tokens, ("linear", "mlp"),
                                              ("token", "pooled")):
        cfg = MofeConfig(d_model=d, n_tokens=t, d_id=8, d_sem=8, d_det=8, n_blocks=4,
                         gate_kind=kind, gate_granularity=gran)
        errs = [max(gradient_check(cfg, seed=s, h=args.h).values()) for s in range(args.seeds)]
        worst = max(worst, max(errs))
        print(json.dumps({"d_model": d, "n_tokens": t, "gate": kind, "granularity": gran,
                          "max_rel_err": max(errs)}))
    print(json.dumps({"worst": worst, "ok": worst <= 1e-4}))


if __name__ == "__main__":
    main()
