"""Run the whole pipeline for one config and print the per-lambda summary.

    python3 scripts/run_pipeline.py configs/smoke.json runs/smoke
    python3 scripts/run_pipeline.py configs/smoke.json runs/full --full
"""
import argparse
import time

from patchfair.cli import run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("out")
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--no-voluntary", action="store_true")
    args = ap.parse_args()
    t0 = time.perf_counter()
    res = run_pipeline(args.config, args.out, full=args.full, voluntary=not args.no_voluntary)
    for stage in ("sweep", "voluntary"):
        if stage not in res:
            continue
        r = res[stage]
        print(f"[{stage}] lambda* = {r.lambda_star}")
        for rec in r.records + list(r.baselines.values()):
            m, s = rec.mean, rec.std
            print(f"  {rec.label:>24}  auc {m['probe_auc']:.4f}±{s['probe_auc']:.4f}  "
                  f"ap {m['target_ap']:.4f}±{s['target_ap']:.4f}  naive {m['naive_auc']:.4f}  "
                  f"dp {m['vendor_dp_auc']:.4f}  |logit| {m['probe_logit_abs']:.3f}{'  *' if rec.flagged else ''}")
    print(f"total {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
