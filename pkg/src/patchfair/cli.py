"""Command-line entry point: ``patchfair <subcommand> [--config c.json] [flags]``.

The config file is one JSON object with optional ``dataset``, ``encoder``,
``train`` and ``sweep`` sections mirroring the dataclass field names. Flags
override the file. Exit status: 0 ok, 2 usage, 3 digest mismatch, 1 otherwise.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from .encoder import EncoderConfig, load_encoder, save_encoder, train_encoder
from .harness import (
    SweepSpec,
    eval_stream_name,
    log_trajectories,
    partitions,
    run_sweep,
    run_voluntary,
)
from .imaging import DigestMismatch, load_patch, save_patch
from .metrics import evaluate_patch
from .synthdata import DatasetSpec, generate, load_dataset, save_dataset
from .trainer import PatchDiverged, TrainConfig, train_patch

SMOKE_REPLICATION = {"patches_per_lambda": 3, "evals_per_patch": 10}
FULL_REPLICATION = {"patches_per_lambda": 10, "evals_per_patch": 25, "grid_points": 13, "lambda_grid": None}


class UsageError(Exception):
    pass


def _section(config: dict, name: str, cls):
    raw = config.get(name, {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"config section {name!r}: unknown keys {unknown}")
    return raw


def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    extra = sorted(set(cfg) - {"dataset", "encoder", "train", "sweep"})
    if extra:
        raise UsageError(f"unknown config sections {extra}")
    return cfg


def dataset_spec(cfg: dict, seed=None) -> DatasetSpec:
    spec = DatasetSpec(**_section(cfg, "dataset", DatasetSpec))
    return replace(spec, seed=seed) if seed is not None else spec


def encoder_config(cfg: dict, seed=None) -> EncoderConfig:
    raw = dict(_section(cfg, "encoder", EncoderConfig))
    if "channels" in raw:
        raw["channels"] = tuple(raw["channels"])
    conf = EncoderConfig(**raw)
    return replace(conf, seed=seed) if seed is not None else conf


def train_config(cfg: dict, seed=None, lam=None) -> TrainConfig:
    conf = TrainConfig(**_section(cfg, "train", TrainConfig))
    if seed is not None:
        conf = replace(conf, seed=seed)
    if lam is not None:
        conf = replace(conf, lam=lam)
    return conf


def sweep_spec(cfg: dict, args) -> SweepSpec:
    raw = {**SMOKE_REPLICATION, **_section(cfg, "sweep", SweepSpec)}
    raw.pop("train", None)
    if args.full:
        raw.update(FULL_REPLICATION)
    raw["train"] = train_config(cfg)
    raw["dataset"] = args.dataset
    raw["encoder"] = args.encoder
    raw["out"] = args.out
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.workers is not None:
        raw["workers"] = args.workers
    return SweepSpec(**raw)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg):
    data = generate(dataset_spec(cfg, args.seed))
    digest = save_dataset(data, args.out)
    return {"out": args.out, "n": len(data), "digest": digest}


def cmd_train_encoder(args, cfg):
    train, _, _ = partitions(load_dataset(args.dataset))
    model = train_encoder(train, encoder_config(cfg, args.seed))
    digest = save_encoder(model, args.out)
    return {"out": args.out, "digest": digest}


def cmd_train_patch(args, cfg):
    _, patch_split, _ = partitions(load_dataset(args.dataset))
    model = load_encoder(args.encoder)
    conf = train_config(cfg, args.seed, args.lam)
    out = Path(args.out)
    try:
        patch, tlog = train_patch(patch_split, model, conf)
    except PatchDiverged as exc:
        save_patch(exc.patch, out.with_suffix(".diverged.json"))
        raise
    save_patch(patch, out)
    tlog.write_csv(out.with_suffix(".log.csv"))
    return {"out": str(out), "digest": patch.digest(), "lambda": conf.lam, "seed": conf.seed}


def cmd_evaluate(args, cfg):
    _, _, eval_split = partitions(load_dataset(args.dataset))
    model = load_encoder(args.encoder)
    patch = load_patch(args.patch) if args.patch else None
    spec = sweep_spec(cfg, args)
    label = patch.seed if patch is not None else "unpatched"
    n = args.evals if args.evals is not None else (spec.evals_per_patch if patch is not None else 1)
    summary = evaluate_patch(patch, model, eval_split, n, spec.seed, eval_stream_name(label), args.mode)
    result = {"n_evals": n, "mode": args.mode, "mean": summary.mean, "std": summary.std,
              "reports": [r.to_dict() for r in summary.reports]}
    Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return {"out": args.out, "probe_auc": summary.mean["probe_auc"], "target_ap": summary.mean["target_ap"]}


def _sweep_result(result):
    return {
        "grid": result.grid,
        "lambda_star": result.lambda_star,
        "failures": result.failures,
        "flagged": [r.lam for r in result.records if r.flagged],
        "seconds": round(result.seconds, 3),
    }


def cmd_sweep(args, cfg):
    return _sweep_result(run_sweep(sweep_spec(cfg, args)))


def cmd_voluntary(args, cfg):
    return _sweep_result(run_voluntary(sweep_spec(cfg, args)))


def cmd_trajectories(args, cfg):
    _, _, eval_split = partitions(load_dataset(args.dataset))
    model = load_encoder(args.encoder)
    patch = load_patch(args.patch)
    sample = eval_split.subset(range(min(args.sample, len(eval_split))))
    seed = args.seed if args.seed is not None else 0
    traj = log_trajectories(patch, model, sample, args.out, seed)
    return {"out": args.out, "pairs": len(traj.ids)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-encoder": cmd_train_encoder,
    "train-patch": cmd_train_patch,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "voluntary": cmd_voluntary,
    "trajectories": cmd_trajectories,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchfair", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--out", required=True, help="output file or directory")
        p.add_argument("--dataset", default="data.bin")
        p.add_argument("--encoder", default="encoder.json")
        if name in ("train-patch",):
            p.add_argument("--lam", type=float)
        if name in ("evaluate", "trajectories"):
            p.add_argument("--patch", required=name == "trajectories")
        if name == "evaluate":
            p.add_argument("--evals", type=int)
            p.add_argument("--mode", choices=("all", "voluntary"), default="all")
        if name == "trajectories":
            p.add_argument("--sample", type=int, default=200)
        p.set_defaults(full=False, workers=None)
        if name in ("sweep", "voluntary", "evaluate"):
            p.add_argument("--full", action="store_true", help="10 patches x 25 evals over 13 lambdas")
            p.add_argument("--workers", type=int)
    return parser


def _emit_error(kind: str, message: str, code: int | None = None) -> None:
    err = {"error": kind, "message": message}
    if code is not None:
        err["exit"] = code
    print(json.dumps(err), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        result = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        _emit_error("UsageError", str(exc), 2)
        return 2
    except DigestMismatch as exc:
        _emit_error("DigestMismatch", str(exc), 3)
        return 3
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured error
        _emit_error(type(exc).__name__, str(exc), 1)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())


def run_pipeline(config_path, out_dir, full: bool = False, voluntary: bool = True, sample: int = 200) -> dict:
    """gen-data -> train-encoder -> sweep [-> voluntary] -> trajectories, all under ``out_dir``.

    Voluntary runs share the sweep's patch directory, so they reuse its patches.
    Returns the in-memory sweep results keyed by stage.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(config_path)
    data_path, enc_path = out / "data.bin", out / "encoder.json"
    save_dataset(generate(dataset_spec(cfg)), data_path)
    train, _, eval_split = partitions(load_dataset(data_path))
    save_encoder(train_encoder(train, encoder_config(cfg)), enc_path)
    args = argparse.Namespace(full=full, dataset=str(data_path), encoder=str(enc_path), out=str(out / "sweep"),
                              seed=None, workers=None)
    spec = sweep_spec(cfg, args)
    results = {"sweep": run_sweep(spec)}
    if voluntary:
        results["voluntary"] = run_voluntary(spec)
    lowest = sorted((out / "sweep" / "patches").glob("patch_l00_*.json"))[0]
    model = load_encoder(enc_path)
    sub = eval_split.subset(range(min(sample, len(eval_split))))
    results["trajectories"] = log_trajectories(load_patch(lowest), model, sub, out / "sweep", spec.seed)
    return results
