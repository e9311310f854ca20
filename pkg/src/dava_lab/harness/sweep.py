"""Train every (architecture setting, seed) pair, evaluate it, and collect metric rows.

Layout of a sweep directory::

    manifest.json            resolved config + code version
    metrics.csv              append-only metric rows
    runs/<arch>-<digest>-s<seed>/
        checkpoint/          networks, optimizer moments, C, RNG state
        c_trajectory.csv     (DAVA only has a non-zero C)
        diagnostics.csv
        rows.csv             this run's metric rows
        run.json             completion marker with timings
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .. import __version__, dava_train, pipe_metric, supervised_metrics
from ..estimators import LoadedVAE
from ..report import MetricReport, MetricRow, append_rows
from ..synthdata import GroundTruthDataset, build_dataset
from .config import ArchitectureSetting, ConfigError, ExperimentConfig, parse_experiment

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
METRICS_CSV = "metrics.csv"


def code_version() -> str:
    """Package version plus a hash of the package sources."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


@dataclass(frozen=True)
class RunSpec:
    architecture: ArchitectureSetting
    seed: int

    @property
    def run_id(self) -> str:
        return f"{self.architecture.name}-{self.architecture.digest}-s{self.seed}"


def run_specs(config: ExperimentConfig) -> list[RunSpec]:
    return [RunSpec(a, s) for a in config.architectures for s in config.seeds]


def evaluation_seed(seed: int, metric: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{metric}".encode()).digest()[:4], "little")


def evaluate_model(model, dataset: GroundTruthDataset, metrics, seed: int, config: ExperimentConfig) -> dict[str, float]:
    """Metric name -> value for one model; ``pipe_rec`` is left to the sweep."""
    ev = config.evaluation
    out: dict[str, float] = {}
    if "mig" in metrics or "dci" in metrics:
        sample = supervised_metrics.representation_sample(model, dataset, ev["n_samples"], evaluation_seed(seed, "repr"))
        if "mig" in metrics:
            out["mig"] = supervised_metrics.mig(sample, ev["bins"])
        if "dci" in metrics:
            out["dci"] = supervised_metrics.dci_disentanglement(sample, ev["bins"])
    if "fvae" in metrics:
        out["fvae"] = supervised_metrics.fvae_metric(model, dataset, n_votes=ev["fvae_votes"], batch_size=ev["fvae_batch"],
                                                     rng=evaluation_seed(seed, "fvae"))
    if "pipe" in metrics or "pipe_rec" in metrics:
        result = pipe_metric.pipe(model, dataset, config.pipe, seed=evaluation_seed(seed, "pipe"))
        out["pipe"] = result.score
    if "rec" in metrics or "pipe_rec" in metrics:
        batch = dataset.sample_random(ev["n_samples"], np.random.default_rng(evaluation_seed(seed, "rec")))
        out["rec"] = float(np.mean((model.reconstruct(batch.images) - batch.images) ** 2, dtype=np.float64))
    return out


def _rows_for(spec: RunSpec, dataset_id: str, values: dict[str, float], metrics, sampler: str, flags: str) -> list[MetricRow]:
    rows = []
    for m in metrics:
        if m == "pipe_rec":
            continue
        rows.append(MetricRow(dataset_id, spec.architecture.name, spec.architecture.digest, spec.seed, m,
                              values.get(m, float("nan")), sampler if m == "pipe" else "", flags))
    return rows


def _write_csv(path: Path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in r) + "\n")


def execute_run(spec: RunSpec, config: ExperimentConfig, run_dir: Path, dataset: GroundTruthDataset | None = None) -> dict:
    """Train and evaluate one run; returns the run record written to ``run.json``."""
    torch.set_num_threads(config.threads)
    dataset = dataset or build_dataset(config.dataset)
    dataset_id = f"{dataset.name}-{config.dataset_digest}"
    run_dir.mkdir(parents=True, exist_ok=True)
    record = {"run_id": spec.run_id, "architecture": spec.architecture.name, "digest": spec.architecture.digest,
              "seed": spec.seed, "status": "ok"}
    extra_values: dict[str, float] = {}
    t0 = time.perf_counter()
    try:
        train_cfg = spec.architecture.train_config()
        if spec.architecture.name == "dava":
            state, _ = dava_train.train(dataset, train_cfg, spec.seed)
        else:
            state = dava_train.train_beta_vae(dataset, train_cfg, spec.seed)
        record["train_seconds"] = time.perf_counter() - t0
        dava_train.save_state(state, run_dir / "checkpoint", spec.architecture.name,
                              extra={"digest": spec.architecture.digest, "dataset": dataset_id})
        dava_train.write_run_outputs(state, run_dir)
        record["final_C"] = state.C
        record["final_kl"] = state.diagnostics[-1].kl_total if state.diagnostics else None

        t1 = time.perf_counter()
        model = LoadedVAE(run_dir / "checkpoint")
        values = evaluate_model(model, dataset, config.metrics, spec.seed, config)
        collapsed = pipe_metric.is_collapsed(model, rng=evaluation_seed(spec.seed, "collapse"))
        record["eval_seconds"] = time.perf_counter() - t1
        flags = "collapsed" if collapsed else ""
        if "pipe_rec" in config.metrics and "rec" not in config.metrics:
            extra_values["rec"] = values["rec"]
        if "pipe_rec" in config.metrics and "pipe" not in config.metrics:
            extra_values["pipe"] = values["pipe"]
        rows = _rows_for(spec, dataset_id, values, config.metrics, config.pipe.fp_sampler, flags)
    except Exception as exc:  # a failed run is recorded, not fatal to the sweep
        logger.error("run %s failed: %s", spec.run_id, exc)
        record["status"] = "failed"
        record["error"] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        rows = _rows_for(spec, dataset_id, {}, config.metrics, config.pipe.fp_sampler, "failed")
    MetricReport(rows).write(run_dir / "rows.csv")
    record["extra_values"] = extra_values
    record["total_seconds"] = time.perf_counter() - t0
    (run_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def _run_worker(args):
    spec, config_resolved, run_dir = args
    config = parse_experiment(config_resolved)
    return execute_run(spec, config, Path(run_dir))


def _pipe_rec_rows(config: ExperimentConfig, out_dir: Path, specs: list[RunSpec], report: MetricReport) -> list[MetricRow]:
    """PIPE_Rec rows for every completed run, normalized over the sweep's population."""
    per_run = {}  # keyed by run_id; RunSpec holds a dict and is unhashable
    for spec in specs:
        rec_path = out_dir / "runs" / spec.run_id / "run.json"
        record = json.loads(rec_path.read_text())
        if record["status"] != "ok":
            continue
        rows = {r.metric: r for r in MetricReport.read(out_dir / "runs" / spec.run_id / "rows.csv")}
        values = {**{m: r.value for m, r in rows.items()}, **record.get("extra_values", {})}
        flags = next(iter(rows.values())).flags if rows else ""
        per_run[spec.run_id] = (values, flags, next(iter(rows.values())).dataset if rows else "")
    population = [v["rec"] for v, _, _ in per_run.values()]
    out = []
    for spec in specs:
        if spec.run_id not in per_run:
            continue
        values, flags, dataset_id = per_run[spec.run_id]
        row = MetricRow(dataset_id, spec.architecture.name, spec.architecture.digest, spec.seed, "pipe_rec",
                        pipe_metric.pipe_rec(values["pipe"], values["rec"], population, config.pipe_rec_alpha),
                        config.pipe.fp_sampler, flags)
        if row.key not in report:
            out.append(row)
    return out


@dataclass
class SweepResult:
    report: MetricReport
    failures: int
    out_dir: Path

    @property
    def exit_code(self) -> int:
        return 3 if self.failures else 0


def write_manifest(config: ExperimentConfig, out_dir: Path) -> dict:
    manifest = {"config": config.resolved(), "code_version": code_version()}
    path = out_dir / MANIFEST
    if path.exists():
        old = json.loads(path.read_text())
        if old["config"] != manifest["config"]:
            raise ConfigError(f"{out_dir} holds a sweep with a different configuration")
        if old.get("code_version") != manifest["code_version"]:
            logger.warning("resuming a sweep recorded with code version %s", old.get("code_version"))
        return old
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run_sweep(config: ExperimentConfig, out_dir: str | os.PathLike) -> SweepResult:
    """Run (or resume) a sweep; completed runs found in ``out_dir`` are not recomputed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(config, out_dir)
    metrics_path = out_dir / METRICS_CSV
    report = MetricReport.read(metrics_path)
    specs = run_specs(config)

    pending = [s for s in specs if not (out_dir / "runs" / s.run_id / "run.json").exists()]
    dataset = build_dataset(config.dataset) if pending else None

    def finish(spec: RunSpec):
        rows = [r for r in MetricReport.read(out_dir / "runs" / spec.run_id / "rows.csv") if r.key not in report]
        if rows:
            append_rows(metrics_path, rows)
            report.extend(rows)

    if config.workers > 1 and len(pending) > 1:
        from multiprocessing import get_context
        jobs = [(s, config.resolved(), str(out_dir / "runs" / s.run_id)) for s in pending]
        with get_context("spawn").Pool(config.workers) as pool:
            done = iter(pool.imap(_run_worker, jobs))
            for spec in specs:
                if spec in pending:
                    next(done)
                finish(spec)
    else:
        for spec in specs:
            if spec in pending:
                logger.info("run %s", spec.run_id)
                execute_run(spec, config, out_dir / "runs" / spec.run_id, dataset)
            finish(spec)

    if "pipe_rec" in config.metrics:
        rows = _pipe_rec_rows(config, out_dir, specs, report)
        if rows:
            append_rows(metrics_path, rows)
            report.extend(rows)

    failures = sum(json.loads((out_dir / "runs" / s.run_id / "run.json").read_text())["status"] != "ok" for s in specs)
    return SweepResult(report, failures, out_dir)


def replay(manifest_path: str | os.PathLike, out_dir: str | os.PathLike) -> SweepResult:
    """Re-run a sweep from its manifest into a new directory."""
    manifest = json.loads(Path(manifest_path).read_text())
    return run_sweep(parse_experiment(manifest["config"]), out_dir)
