"""Lambda sweeps, voluntary-application runs and representation trajectories.

A sweep trains ``patches_per_lambda`` patches at every lambda, evaluates each
``evals_per_patch`` times, and writes per-evaluation rows, per-lambda
aggregates and an SVG of separability/utility against log10(lambda).
All randomness descends from ``SweepSpec.seed`` through named streams.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import svg
from .encoder import EncoderModel, encode_array, load_encoder
from .imaging import Patch, load_patch, save_patch
from .metrics import EvalSummary, evaluate_patch, fit_probe, patched_reps
from .rng import stream
from .synthdata import Dataset, load_dataset, split
from .trainer import TrainConfig, calibrate_lambda, make_noise_patch, train_patch

log = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.5, 0.25, 0.25)
CSV_COLUMNS = [
    "lambda",
    "patch_seed",
    "eval_index",
    "probe_auc",
    "target_ap",
    "naive_auc",
    "cross_auc",
    "adv_vendor_auc",
    "vendor_dp_auc",
    "mmd_sq",
    "fidelity",
]
SUMMARY_METRICS = CSV_COLUMNS[3:] + ["probe_logit_abs"]


@dataclass
class SweepSpec:
    lambda_grid: list[float] | None = None
    grid_points: int = 13
    grid_decades: float = 6.0
    patches_per_lambda: int = 10
    evals_per_patch: int = 25
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "data.bin"
    encoder: str = "encoder.json"
    out: str = "sweep"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.lambda_grid is not None:
            grid = [float(v) for v in self.lambda_grid]
            if not grid:
                raise ValueError("lambda_grid is empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError("lambda_grid must be strictly increasing")
            if grid[0] < 0:
                raise ValueError("lambda must be non-negative")
            self.lambda_grid = grid


@dataclass
class SweepRecord:
    label: str  # lambda as text, or "noise" / "unpatched"
    lam: float | None
    mean: dict[str, float]
    std: dict[str, float]
    n: int
    flagged: bool = False


@dataclass
class SweepResult:
    records: list[SweepRecord]
    baselines: dict[str, SweepRecord]
    rows: list[dict]
    grid: list[float]
    lambda_star: float | None
    failures: list[dict]
    seconds: float

    def record_for(self, lam: float) -> SweepRecord:
        for r in self.records:
            if r.lam == lam:
                return r
        raise KeyError(lam)


@dataclass
class Trajectory:
    ids: list[int]
    a: list[int]
    y: list[int]
    unpatched: np.ndarray
    patched: np.ndarray
    logit_before: np.ndarray
    logit_after: np.ndarray


def partitions(data: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    """(encoder-train, patch-train, eval) split, fixed by the dataset's own seed."""
    return split(data, SPLIT_FRACTIONS, seed=data.spec.seed)


def patch_seed(root: int, index: int) -> int:
    return int(stream(root, "patch-seed", index).integers(2**31 - 1))


def noise_seed(root: int) -> int:
    return int(stream(root, "noise-seed").integers(2**31 - 1))


def eval_stream_name(seed_label) -> tuple:
    return ("eval", seed_label)


def auto_grid(lambda_star: float, points: int, decades: float) -> list[float]:
    exps = np.linspace(-decades / 2.0, decades / 2.0, points) if points > 1 else np.zeros(1)
    return [float(lambda_star * 10.0**e) for e in exps]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _rows_for(label, seed_label, summary: EvalSummary) -> list[dict]:
    rows = []
    for j, rep in enumerate(summary.reports):
        d = rep.to_dict()
        rows.append({"lambda": label, "patch_seed": seed_label, "eval_index": j, **{c: d[c] for c in CSV_COLUMNS[3:]},
                     "probe_logit_abs": d["probe_logit_abs"]})
    return rows


def _aggregate(label, lam, rows: list[dict]) -> SweepRecord:
    arr = np.array([[r[m] for m in SUMMARY_METRICS] for r in rows])
    return SweepRecord(
        label,
        lam,
        dict(zip(SUMMARY_METRICS, arr.mean(axis=0).tolist())),
        dict(zip(SUMMARY_METRICS, arr.std(axis=0).tolist())),
        len(rows),
    )


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])


def write_summary(path, records: list[SweepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["lambda", "log10_lambda", "n"]
        for m in SUMMARY_METRICS:
            head += [f"{m}_mean", f"{m}_std"]
        w.writerow(head + ["flagged"])
        for r in records:
            loglam = "" if r.lam is None or r.lam <= 0 else repr(math.log10(r.lam))
            row = [r.label, loglam, r.n]
            for m in SUMMARY_METRICS:
                row += [repr(r.mean[m]), repr(r.std[m])]
            w.writerow(row + [int(r.flagged)])


# ---------------------------------------------------------------- jobs

_WORKER: dict = {}


def _init_worker(dataset_path, encoder_path):
    data = load_dataset(dataset_path)
    _, patch_split, eval_split = partitions(data)
    _WORKER.update(model=load_encoder(encoder_path), patch_split=patch_split, eval_split=eval_split)


def _patch_path(out: Path, li: int, seed: int) -> Path:
    return out / "patches" / f"patch_l{li:02d}_s{seed}.json"


def _job(job: dict) -> dict:
    """Train (or reuse) one patch and evaluate it; runs in the worker context."""
    model, patch_split, eval_split = _WORKER["model"], _WORKER["patch_split"], _WORKER["eval_split"]
    out = Path(job["out"])
    cfg = TrainConfig(**job["train"])
    path = _patch_path(out, job["li"], cfg.seed)
    try:
        patch = None
        if path.exists():
            cached = load_patch(path)
            if cached.config_digest == cfg.digest():
                patch = cached
        if patch is None:
            patch, tlog = train_patch(patch_split, model, cfg)
            save_patch(patch, path)
            tlog.write_csv(out / "logs" / f"train_l{job['li']:02d}_s{cfg.seed}.csv")
        summary = evaluate_patch(
            patch, model, eval_split, job["evals"], job["root"], eval_stream_name(cfg.seed), job["mode"]
        )
        return {"rows": _rows_for(repr(cfg.lam), cfg.seed, summary), "error": None}
    except Exception as exc:  # recorded, sweep continues
        log.exception("job lambda=%s seed=%s failed", cfg.lam, cfg.seed)
        return {"rows": [], "error": f"{type(exc).__name__}: {exc}"}


def _run_jobs(jobs: list[dict], spec: SweepSpec) -> list[dict]:
    if spec.workers <= 1:
        _init_worker(spec.dataset, spec.encoder)
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(
        max_workers=spec.workers, initializer=_init_worker, initargs=(spec.dataset, spec.encoder)
    ) as pool:
        # map preserves submission order, so collection is deterministic
        return list(pool.map(_job, jobs))


def resolve_grid(spec: SweepSpec, model: EncoderModel, patch_split: Dataset) -> tuple[list[float], float | None]:
    if spec.lambda_grid is not None:
        return list(spec.lambda_grid), None
    lam_star = calibrate_lambda(patch_split, model, spec.train.side, spec.seed, spec.train.init)
    return auto_grid(lam_star, spec.grid_points, spec.grid_decades), lam_star


def _sweep(spec: SweepSpec, mode: str, csv_name: str, svg_name: str, title: str) -> SweepResult:
    t0 = time.perf_counter()
    out = Path(spec.out)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    data = load_dataset(spec.dataset)
    model = load_encoder(spec.encoder)
    _, patch_split, eval_split = partitions(data)
    grid, lam_star = resolve_grid(spec, model, patch_split)

    jobs = []
    for li, lam in enumerate(grid):
        for p in range(spec.patches_per_lambda):
            cfg = replace(spec.train, lam=lam, seed=patch_seed(spec.seed, p))
            jobs.append({"li": li, "train": asdict(cfg), "out": str(out), "evals": spec.evals_per_patch,
                         "root": spec.seed, "mode": mode})
    results = _run_jobs(jobs, spec)

    rows, failures = [], []
    per_lambda: dict[int, list[dict]] = {li: [] for li in range(len(grid))}
    for job, res in zip(jobs, results):
        if res["error"]:
            failures.append({"lambda": job["train"]["lam"], "patch_seed": job["train"]["seed"], "error": res["error"]})
        per_lambda[job["li"]].extend(res["rows"])
        rows.extend(res["rows"])

    nseed = noise_seed(spec.seed)
    noise = make_noise_patch(nseed, spec.train.side, data.images.shape[3])
    noise_rows = _rows_for(
        "noise", nseed,
        evaluate_patch(noise, model, eval_split, spec.evals_per_patch, spec.seed, eval_stream_name("noise"), mode),
    )
    base_rows = _rows_for(
        "unpatched", "", evaluate_patch(None, model, eval_split, 1, spec.seed, eval_stream_name("unpatched"), mode)
    )
    rows = rows + noise_rows + base_rows

    records = [_aggregate(repr(lam), lam, per_lambda[li]) for li, lam in enumerate(grid) if per_lambda[li]]
    baselines = {"noise": _aggregate("noise", None, noise_rows), "unpatched": _aggregate("unpatched", None, base_rows)}
    if mode == "voluntary":
        base = baselines["unpatched"]
        for r in records:
            r.flagged = flag_regime(r, base)

    write_rows(out / csv_name, rows)
    write_summary(out / csv_name.replace(".csv", "_summary.csv"), records + list(baselines.values()))
    (out / svg_name).write_text(tradeoff_chart(records, baselines, title))
    result = SweepResult(records, baselines, rows, grid, lam_star, failures, time.perf_counter() - t0)
    report = {
        "mode": mode,
        "grid": grid,
        "lambda_star": lam_star,
        "failures": failures,
        "flagged": [r.lam for r in records if r.flagged],
    }
    (out / csv_name.replace(".csv", "_report.json")).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if failures:
        log.warning("%d sweep jobs failed", len(failures))
    return result


def run_sweep(spec: SweepSpec) -> SweepResult:
    return _sweep(spec, "all", "sweep.csv", "tradeoff.svg", "Separability and utility vs regularisation")


def run_voluntary(spec: SweepSpec) -> SweepResult:
    return _sweep(spec, "voluntary", "voluntary.csv", "voluntary.svg", "Voluntary application (a = 1 only)")


def flag_regime(rec: SweepRecord, base: SweepRecord) -> bool:
    """Probe AUC at least 2 std below baseline while target AP stays within 1 std."""
    auc_drop = base.mean["probe_auc"] - rec.mean["probe_auc"]
    ap_shift = abs(base.mean["target_ap"] - rec.mean["target_ap"])
    return bool(auc_drop >= 2 * rec.std["probe_auc"] and auc_drop > 0 and ap_shift <= rec.std["target_ap"])


def tradeoff_chart(records: list[SweepRecord], baselines: dict[str, SweepRecord], title: str) -> str:
    xs = [math.log10(r.lam) if r.lam and r.lam > 0 else 0.0 for r in records]
    chart = svg.Chart(title, "log10(lambda)", "metric")
    for metric, label, color in (("probe_auc", "probe AUC (a)", svg.PALETTE[0]), ("target_ap", "target AP (y)", svg.PALETTE[1])):
        chart.series.append(
            svg.Series(label, xs, [r.mean[metric] for r in records], [r.std[metric] for r in records], color)
        )
        chart.hlines.append(svg.HLine(f"{label}, unpatched", baselines["unpatched"].mean[metric], color, "6,4"))
        chart.hlines.append(svg.HLine(f"{label}, noise patch", baselines["noise"].mean[metric], color, "2,3"))
    for x, r in zip(xs, records):
        if r.flagged:
            chart.markers.append((x, r.mean["probe_auc"], "#d95f02"))
    return chart.render()


# ---------------------------------------------------------------- trajectories


def log_trajectories(
    patch: Patch, model: EncoderModel, sample: Dataset, out_dir, seed: int = 0
) -> Trajectory:
    """Paired (unpatched, patched) representations and adversarial probe logits.

    The "before" probe is fit on unpatched representations of the sample and
    the "after" probe on the patched ones, each scored on its own inputs.
    """
    if len(sample) == 0:
        raise ValueError("empty trajectory sample")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    before = encode_array(model, sample.images)
    after = patched_reps(model, sample, patch, stream(seed, "trajectory"))
    lb = fit_probe(before, sample.a).logits(before)
    la = fit_probe(after, sample.a).logits(after)
    traj = Trajectory(sample.ids.tolist(), sample.a.tolist(), sample.y.tolist(), before, after, lb, la)

    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        k = before.shape[1]
        w.writerow(["example_id", "a", "y"] + [f"r{i}_unpatched" for i in range(k)] +
                   [f"r{i}_patched" for i in range(k)] + ["probe_logit_before", "probe_logit_after"])
        for i in range(len(sample)):
            w.writerow([traj.ids[i], traj.a[i], traj.y[i]] + [repr(v) for v in before[i]] +
                       [repr(v) for v in after[i]] + [repr(lb[i]), repr(la[i])])
    a = np.asarray(traj.a)
    groups = [(f"a = {v}", lb[a == v].tolist(), la[a == v].tolist()) for v in (1, 0)]
    (out / "trajectories.svg").write_text(
        svg.scatter("Adversarial probe logit", "before patching", "after patching", groups)
    )
    return traj
