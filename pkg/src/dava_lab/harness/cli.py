"""Command line entry point: ``dava-lab <subcommand>``.

Exit codes: 0 success, 1 configuration error, 2 run failure, 3 sweep
finished with failed runs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import dava_train, pipe_metric, supervised_metrics
from ..estimators import LoadedVAE
from ..report import MetricReport, MetricRow, append_rows
from ..synthdata import build_dataset, cache_dir, load_dataset, save_dataset
from . import config as cfg
from .plots import plot_capacity, read_trajectory
from .summary import format_table, summarize, write_summary_csv
from .sweep import METRICS_CSV, evaluate_model, evaluation_seed, replay, run_sweep

logger = logging.getLogger("dava_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_PARTIAL = 0, 1, 2, 3


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # accepted before or after the subcommand; the subcommand copy must not reset earlier values
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=default(None), help="random seed")
    p.add_argument("--profile", choices=sorted(cfg.PROFILES), default=default(None),
                   help="desk (32 px, 20k steps) or full (64 px, 150k steps)")
    p.add_argument("--out", default=default(None), help="output path")
    p.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="dava-lab", description=__doc__, parents=[_global_flags(suppress=False)],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="render and cache a procedural dataset")
    p.add_argument("--config", help="JSON dataset options (toysprites keys)")

    p = sub.add_parser("train", parents=[common], help="train one DAVA or beta-VAE model")
    p.add_argument("--config", required=True, help='JSON {"architecture": ..., "params": {...}}')
    p.add_argument("--dataset", required=True, help="dataset directory from generate-data")

    p = sub.add_parser("eval-pipe", parents=[common], help="PIPE score of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="JSON PipeConfig keys plus optional alpha")
    p.add_argument("--metric", choices=["pipe", "pipe_rec"], default="pipe")
    p.add_argument("--metrics", help="metrics CSV to append to (default <out>/metrics.csv)")

    p = sub.add_parser("eval-supervised", parents=[common], help="MIG, DCI and FVAE metric of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metrics", help="metrics CSV to append to (default <out>/metrics.csv)")

    p = sub.add_parser("sweep", parents=[common], help="train and evaluate every architecture x seed")
    p.add_argument("--config", help="experiment JSON")
    p.add_argument("--replay", help="manifest.json of an earlier sweep to re-run")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("report", parents=[common], help="correlations, summaries and capacity plots")
    p.add_argument("--metrics", required=True)
    return parser


def _metrics_path(args) -> Path:
    if args.metrics:
        return Path(args.metrics)
    return Path(args.out or ".") / METRICS_CSV


def _checkpoint_identity(model: LoadedVAE, dataset) -> tuple[str, str, str]:
    cfg_path = model.path / "config.txt"
    entries = dict(line.split("=", 1) for line in cfg_path.read_text().splitlines() if "=" in line)
    dataset_id = entries.get("dataset", dataset.name)
    return dataset_id, model.architecture, entries.get("digest", "-")


def cmd_generate_data(args) -> int:
    raw = cfg.load_json(args.config) if args.config else {}
    profile = args.profile or "desk"
    raw.setdefault("side", cfg.PROFILES[profile]["side"])
    try:
        dataset = build_dataset(raw)
    except ValueError as exc:
        raise cfg.ConfigError(str(exc)) from exc
    out = Path(args.out) if args.out else cache_dir() / f"{dataset.name}-{cfg.digest(dataset.config)}"
    save_dataset(dataset, out)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    setting = cfg.parse_train_config(cfg.load_json(args.config), args.profile or "desk")
    dataset = load_dataset(args.dataset)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or f"run-{setting.name}-{setting.digest}-s{seed}")
    train_cfg = setting.train_config()
    if setting.name == "dava":
        state, _ = dava_train.train(dataset, train_cfg, seed)
    else:
        state = dava_train.train_beta_vae(dataset, train_cfg, seed)
    dava_train.save_state(state, out / "checkpoint", setting.name,
                          extra={"digest": setting.digest, "dataset": dataset.name})
    dava_train.write_run_outputs(state, out)
    print(out)
    return EXIT_OK


def cmd_eval_pipe(args) -> int:
    raw = cfg.load_json(args.config) if args.config else {}
    if args.profile:
        raw.setdefault("steps", cfg.PROFILES[args.profile]["pipe_steps"])
    pipe_cfg, alpha = cfg.parse_pipe_config(raw)
    dataset = load_dataset(args.dataset)
    model = LoadedVAE(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    dataset_id, arch, dig = _checkpoint_identity(model, dataset)
    result = pipe_metric.pipe(model, dataset, pipe_cfg, seed)
    flags = "collapsed" if pipe_metric.is_collapsed(model, rng=evaluation_seed(seed, "collapse")) else ""
    value = result.score
    if args.metric == "pipe_rec":
        batch = dataset.sample_random(10_000, np.random.default_rng(evaluation_seed(seed, "rec")))
        rec = float(np.mean((model.reconstruct(batch.images) - batch.images) ** 2, dtype=np.float64))
        existing = MetricReport.read(_metrics_path(args))
        population = [r.value for r in existing if r.metric == "rec" and r.dataset == dataset_id] + [rec]
        value = pipe_metric.pipe_rec(result.score, rec, population, alpha)
    row = MetricRow(dataset_id, arch, dig, seed, args.metric, value, pipe_cfg.fp_sampler, flags)
    path = _metrics_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    append_rows(path, [row])
    print(f"{args.metric}={value:.4f} test_accuracy={result.test_accuracy:.4f}")
    return EXIT_OK


def cmd_eval_supervised(args) -> int:
    dataset = load_dataset(args.dataset)
    model = LoadedVAE(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    dataset_id, arch, dig = _checkpoint_identity(model, dataset)
    experiment = cfg.parse_experiment({"metrics": ["mig", "dci", "fvae"]}, profile=args.profile)
    values = evaluate_model(model, dataset, ["mig", "dci", "fvae"], seed, experiment)
    rows = [MetricRow(dataset_id, arch, dig, seed, m, values[m]) for m in ("mig", "dci", "fvae")]
    path = _metrics_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    append_rows(path, rows)
    for r in rows:
        print(f"{r.metric}={r.value:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if bool(args.config) == bool(args.replay):
        raise cfg.ConfigError("pass exactly one of --config or --replay")
    if not args.out:
        raise cfg.ConfigError("--out is required for sweep")
    if args.replay:
        result = replay(args.replay, args.out)
    else:
        raw = cfg.load_json(args.config)
        if args.workers:
            raw["workers"] = args.workers
        seeds = [args.seed] if args.seed is not None else None
        experiment = cfg.parse_experiment(raw, profile=args.profile, seeds=seeds)
        result = run_sweep(experiment, args.out)
    print(format_table(summarize(result.report)))
    return result.exit_code


def cmd_report(args) -> int:
    report = MetricReport.read(args.metrics)
    if not len(report):
        raise cfg.ConfigError(f"{args.metrics}: no metric rows")
    out = Path(args.out or Path(args.metrics).parent / "report")
    out.mkdir(parents=True, exist_ok=True)
    supervised_metrics.correlation_report(report, out)
    summary = summarize(report)
    write_summary_csv(summary, out / "summary.csv")
    (out / "summary.txt").write_text(format_table(summary) + "\n")

    runs = Path(args.metrics).parent / "runs"
    groups: dict[str, list] = {}
    for traj in sorted(runs.glob("*/c_trajectory.csv")):
        record = json.loads((traj.parent / "run.json").read_text()) if (traj.parent / "run.json").exists() else {}
        if record.get("architecture", "dava") != "dava":
            continue
        label = f"dava-{record.get('digest', traj.parent.name)}"
        groups.setdefault(label, []).append(read_trajectory(traj))
    if groups:
        plot_capacity(groups, out / "capacity.png")
    print(format_table(summary))
    print(out)
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval-pipe": cmd_eval_pipe,
    "eval-supervised": cmd_eval_supervised,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except cfg.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything past config validation is a run failure
        logger.debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
