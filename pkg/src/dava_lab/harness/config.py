"""Experiment configuration: a JSON tree validated against fixed key sets.

Top-level keys of an experiment file::

    {
      "name": "desk-toysprites",          # free text, used in the manifest
      "profile": "desk",                  # desk | full; fills unset defaults
      "dataset": {"kind": "toysprites", "side": 32},
      "architectures": [
        {"name": "dava", "params": {}},
        {"name": "beta_vae", "params": {"beta": 1.0}}
      ],
      "seeds": [0, 1, 2],
      "metrics": ["mig", "dci", "fvae", "pipe", "rec", "pipe_rec"],
      "pipe": {"steps": 2000},            # PipeConfig overrides
      "evaluation": {"n_samples": 10000, "bins": 20, "fvae_votes": 800, "fvae_batch": 64},
      "pipe_rec_alpha": 0.5,
      "workers": 1,
      "threads": 1
    }

Unknown keys anywhere are a ``ConfigError``.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..dava_train import BetaVAEConfig, DavaConfig
from ..pipe_metric import PipeConfig
from ..synthdata import ToySpritesConfig, build_toysprites


class ConfigError(ValueError):
    pass


ARCHITECTURES = {"dava": DavaConfig, "beta_vae": BetaVAEConfig}
METRICS = ("mig", "dci", "fvae", "pipe", "rec", "pipe_rec")

PROFILES = {
    "desk": {
        "side": 32,
        "total_steps": 20_000,
        "batch_size": 64,
        "seeds": [0, 1, 2],
        "pipe_steps": 2_000,
        # keeps the capacity reachable in 20k steps equal to the full 150k-step schedule
        "dava_delta_C": 3e-4,
    },
    "full": {
        "side": 64,
        "total_steps": 150_000,
        "batch_size": 128,
        "seeds": [0, 1, 2, 3, 4],
        "pipe_steps": 10_000,
        "dava_delta_C": 4e-5,
    },
}

EVALUATION_DEFAULTS = {"n_samples": 10_000, "bins": 20, "fvae_votes": 800, "fvae_batch": 64}
TOP_LEVEL_KEYS = {"name", "profile", "dataset", "architectures", "seeds", "metrics", "pipe", "evaluation",
                  "pipe_rec_alpha", "workers", "threads", "output_dir"}


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


@dataclass(frozen=True)
class ArchitectureSetting:
    name: str
    params: dict

    @property
    def digest(self) -> str:
        return digest({"name": self.name, "params": self.params})

    def train_config(self):
        return ARCHITECTURES[self.name](**self.params)


def resolve_architecture(entry: dict, profile: str) -> ArchitectureSetting:
    unknown = set(entry) - {"name", "params"}
    if unknown:
        raise ConfigError(f"unknown architecture key(s): {sorted(unknown)}")
    name = entry.get("name")
    if name not in ARCHITECTURES:
        raise ConfigError(f"architecture must be one of {sorted(ARCHITECTURES)}, got {name!r}")
    cls = ARCHITECTURES[name]
    known = {f.name for f in dataclasses.fields(cls)}
    params = dict(entry.get("params", {}))
    bad = set(params) - known
    if bad:
        raise ConfigError(f"unknown {name} parameter(s): {sorted(bad)}")
    prof = PROFILES[profile]
    params.setdefault("total_steps", prof["total_steps"])
    params.setdefault("batch_size", prof["batch_size"])
    if name == "dava":
        params.setdefault("delta_C", prof["dava_delta_C"])
    try:
        resolved = dataclasses.asdict(cls(**params))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} parameters: {exc}") from exc
    return ArchitectureSetting(name, resolved)


@dataclass
class ExperimentConfig:
    name: str
    profile: str
    dataset: dict
    architectures: list[ArchitectureSetting]
    seeds: list[int]
    metrics: list[str]
    pipe: PipeConfig
    evaluation: dict
    pipe_rec_alpha: float = 0.5
    workers: int = 1
    threads: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def dataset_digest(self) -> str:
        return digest(self.dataset)

    def resolved(self) -> dict:
        """Fully expanded form; replaying it reproduces the sweep."""
        return {
            "name": self.name,
            "profile": self.profile,
            "dataset": self.dataset,
            "architectures": [{"name": a.name, "params": a.params} for a in self.architectures],
            "seeds": list(self.seeds),
            "metrics": list(self.metrics),
            "pipe": dataclasses.asdict(self.pipe),
            "evaluation": dict(self.evaluation),
            "pipe_rec_alpha": self.pipe_rec_alpha,
            "workers": self.workers,
            "threads": self.threads,
        }


def parse_experiment(raw: dict, profile: str | None = None, seeds: list[int] | None = None) -> ExperimentConfig:
    """Validate a raw config tree; ``profile``/``seeds`` override the file."""
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    raw = copy.deepcopy(raw)
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown experiment key(s): {sorted(unknown)}")
    profile = profile or raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    prof = PROFILES[profile]

    dataset = dict(raw.get("dataset", {"kind": "toysprites"}))
    dataset.setdefault("kind", "toysprites")
    if dataset["kind"] != "toysprites":
        raise ConfigError(f"unknown dataset kind {dataset['kind']!r}")
    dataset.setdefault("side", prof["side"])
    try:
        dataset = ToySpritesConfig.from_dict(dataset).to_dict()
        build_toysprites(dataset)  # geometry checks only; rendering is lazy
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    arch_entries = raw.get("architectures", [{"name": "dava"}, {"name": "beta_vae", "params": {"beta": 1.0}}])
    if not arch_entries:
        raise ConfigError("at least one architecture is required")
    architectures = [resolve_architecture(e, profile) for e in arch_entries]
    if len({a.digest for a in architectures}) != len(architectures):
        raise ConfigError("duplicate architecture settings")

    seeds = list(seeds if seeds is not None else raw.get("seeds", prof["seeds"]))
    if not seeds or len(set(seeds)) != len(seeds) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of distinct integers")

    metrics = list(raw.get("metrics", METRICS))
    bad = [m for m in metrics if m not in METRICS]
    if bad or len(set(metrics)) != len(metrics):
        raise ConfigError(f"metrics must be distinct entries of {METRICS}, got {metrics}")

    pipe_raw = dict(raw.get("pipe", {}))
    pipe_raw.setdefault("steps", prof["pipe_steps"])
    try:
        pipe = PipeConfig.from_dict(pipe_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    evaluation = dict(EVALUATION_DEFAULTS)
    ev = raw.get("evaluation", {})
    bad = set(ev) - set(EVALUATION_DEFAULTS)
    if bad:
        raise ConfigError(f"unknown evaluation key(s): {sorted(bad)}")
    evaluation.update(ev)

    workers, threads = int(raw.get("workers", 1)), int(raw.get("threads", 1))
    if workers < 1 or threads < 1:
        raise ConfigError("workers and threads must be >= 1")

    return ExperimentConfig(
        name=str(raw.get("name", "experiment")), profile=profile, dataset=dataset, architectures=architectures,
        seeds=seeds, metrics=metrics, pipe=pipe, evaluation=evaluation,
        pipe_rec_alpha=float(raw.get("pipe_rec_alpha", 0.5)), workers=workers, threads=threads, raw=raw,
    )


def load_json(path: str | os.PathLike) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_experiment(path: str | os.PathLike, **overrides) -> ExperimentConfig:
    return parse_experiment(load_json(path), **overrides)


def parse_train_config(raw: dict, profile: str = "desk") -> ArchitectureSetting:
    """Schema of ``train --config``: {"architecture": "dava" | "beta_vae", "params": {...}}."""
    unknown = set(raw) - {"architecture", "params", "profile"}
    if unknown:
        raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
    profile = raw.get("profile", profile)
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}")
    return resolve_architecture({"name": raw.get("architecture", "dava"), "params": raw.get("params", {})}, profile)


def parse_pipe_config(raw: dict) -> tuple[PipeConfig, float]:
    """Schema of ``eval-pipe --config``: PipeConfig keys plus optional ``alpha``."""
    raw = dict(raw)
    alpha = float(raw.pop("alpha", 0.5))
    try:
        return PipeConfig.from_dict(raw), alpha
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
