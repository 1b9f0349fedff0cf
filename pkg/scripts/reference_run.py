"""Run the smoke pipeline once and pin the regression thresholds it implies.

    python3 scripts/reference_run.py [--out runs/reference] [--write tests/reference_smoke.json]

Margins measured here are frozen at SAFETY x the observed value, so the
acceptance suite tolerates run-to-run drift (e.g. a different BLAS) while
still catching a pipeline that stops obscuring the attribute.
"""
import argparse
import json
import platform
import time
from pathlib import Path

import numpy as np

from patchfair.cli import run_pipeline

SAFETY = 0.5


def measure(results) -> dict:
    sweep = results["sweep"]
    lo, hi = sweep.records[0], sweep.records[-1]
    base = sweep.baselines["unpatched"]
    return {
        "grid": sweep.grid,
        "low_lambda_auc_drop": base.mean["probe_auc"] - lo.mean["probe_auc"],
        "low_vs_high_auc_gap": hi.mean["probe_auc"] - lo.mean["probe_auc"],
        "naive_margin": abs(base.mean["naive_auc"] - 0.5) - abs(lo.mean["naive_auc"] - 0.5),
        "high_lambda_auc_gap": base.mean["probe_auc"] - hi.mean["probe_auc"],
        "high_lambda_auc_std": hi.std["probe_auc"],
        "high_lambda_ap_gap": base.mean["target_ap"] - hi.mean["target_ap"],
        "high_lambda_ap_std": hi.std["target_ap"],
        "unpatched_probe_auc": base.mean["probe_auc"],
        "unpatched_target_ap": base.mean["target_ap"],
        "voluntary_flagged": [r.lam for r in results["voluntary"].records if r.flagged],
        "sweep_seconds": sweep.seconds,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/smoke.json")
    ap.add_argument("--out", default="runs/reference")
    ap.add_argument("--write", default="tests/reference_smoke.json")
    args = ap.parse_args()
    t0 = time.perf_counter()
    results = run_pipeline(args.config, args.out)
    measured = measure(results)
    measured["pipeline_seconds"] = time.perf_counter() - t0
    pinned = {
        "measured": measured,
        "thresholds": {
            "low_lambda_auc_drop": SAFETY * measured["low_lambda_auc_drop"],
            "low_vs_high_auc_gap": SAFETY * measured["low_vs_high_auc_gap"],
            "naive_margin": SAFETY * measured["naive_margin"],
            "pipeline_seconds": measured["pipeline_seconds"],
            "runtime_tolerance": 0.5,
        },
        "machine": {"python": platform.python_version(), "numpy": np.__version__, "processor": platform.machine()},
    }
    Path(args.write).write_text(json.dumps(pinned, indent=2, sort_keys=True) + "\n")
    print(json.dumps(pinned, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
