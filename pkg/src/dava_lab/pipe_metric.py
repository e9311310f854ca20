"""PIPE: can a discriminator tell reconstructions from factorial generations?

A model is anything exposing ``encode(images) -> (mean, log_var)`` and
``decode(z) -> images`` on NHWC arrays in [0, 1], plus ``z_dim``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from . import vae_core
from ._validation import as_rng
from .dava_train import discriminator_accuracy
from .synthdata import GroundTruthDataset, ObservationBatch
from .vae_core import NetworkConfig

logger = logging.getLogger(__name__)

FP_SAMPLERS = ("uniform", "permute")


@dataclass
class PipeConfig:
    set_size: int = 12_800
    train_fraction: float = 0.9
    steps: int = 10_000
    batch_size: int = 64
    fp_sampler: str = "uniform"
    learning_rate: float = 1e-4
    range_batch: int = 2048
    chunk: int = 512

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.steps < 1 or self.batch_size < 2 or self.set_size < 2:
            raise ValueError("steps >= 1, batch_size >= 2 and set_size >= 2 are required")
        if self.fp_sampler not in FP_SAMPLERS:
            raise ValueError(f"fp_sampler must be one of {FP_SAMPLERS}")

    @classmethod
    def from_dict(cls, d: dict) -> "PipeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PipeConfig key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class SampleSets:
    s_ep: ObservationBatch
    s_fp: ObservationBatch
    provenance: str

    def __post_init__(self):
        if len(self.s_ep) != len(self.s_fp):
            raise ValueError("EP and FP sets must have equal size")


@dataclass
class PipeResult:
    score: float
    test_accuracy: float
    n_train: int
    n_test: int
    sampler: str
    seed: int


def pipe_score(test_accuracy: float) -> float:
    return 2.0 * (1.0 - test_accuracy)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _encode_sampled(model, images: np.ndarray, rng: np.random.Generator, chunk: int = 512) -> np.ndarray:
    out = []
    for sl in _chunks(len(images), chunk):
        mean, log_var = model.encode(images[sl])
        mean, log_var = np.asarray(mean, np.float64), np.asarray(log_var, np.float64)
        noise = rng.standard_normal(mean.shape)
        out.append(vae_core.reparameterize(mean, log_var, noise))
    return np.concatenate(out)


def _decode(model, z: np.ndarray, chunk: int = 512) -> np.ndarray:
    return np.concatenate([np.asarray(model.decode(z[sl]), np.float32) for sl in _chunks(len(z), chunk)])


def _check_model(model, dataset):
    shape = getattr(model, "input_shape", None)
    if shape is not None and tuple(shape) != tuple(dataset.image_shape):
        raise ValueError(f"model expects {tuple(shape)} images, dataset has {tuple(dataset.image_shape)}")


def sample_ep(model, dataset: GroundTruthDataset, n: int, rng, return_latents: bool = False):
    """Reconstructions decoded from z ~ q(z|x) for n fresh data samples."""
    _check_model(model, dataset)
    rng = as_rng(rng)
    batch = dataset.sample_random(n, rng)
    z = _encode_sampled(model, batch.images, rng)
    out = ObservationBatch(_decode(model, z), batch.factors)
    return (out, z) if return_latents else out


def sample_fp_permute(model, dataset: GroundTruthDataset, n: int, rng, return_latents: bool = False):
    """Decode per-dimension shuffled posterior samples of n fresh data samples."""
    if n < 2:
        raise ValueError("the permutation sampler needs n >= 2")
    _check_model(model, dataset)
    rng = as_rng(rng)
    batch = dataset.sample_random(n, rng)
    z = rng.permuted(_encode_sampled(model, batch.images, rng), axis=0)
    out = ObservationBatch(_decode(model, z))
    return (out, z) if return_latents else out


def estimate_latent_ranges(model, dataset: GroundTruthDataset, rng, n: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension min and max of sampled latents over an n-image encoding pass."""
    rng = as_rng(rng)
    z = _encode_sampled(model, dataset.sample_random(n, rng).images, rng)
    return z.min(axis=0), z.max(axis=0)


def sample_fp_uniform(model, dataset: GroundTruthDataset, n: int, rng, range_batch: int = 2048,
                      ranges: tuple[np.ndarray, np.ndarray] | None = None, return_latents: bool = False):
    """Decode latents drawn i.i.d. uniform over each dimension's estimated range.

    A dimension whose range collapses to a point is held at that value.
    """
    _check_model(model, dataset)
    rng = as_rng(rng)
    lo, hi = ranges if ranges is not None else estimate_latent_ranges(model, dataset, rng, range_batch)
    u = rng.random((n, len(lo)))
    z = lo + u * (hi - lo)
    z = np.where(hi > lo, z, lo)
    out = ObservationBatch(_decode(model, z))
    return (out, z) if return_latents else out


def build_sample_sets(model, dataset, n: int, rng, sampler: str = "uniform", range_batch: int = 2048) -> SampleSets:
    rng = as_rng(rng)
    s_ep = sample_ep(model, dataset, n, rng)
    if sampler == "uniform":
        s_fp = sample_fp_uniform(model, dataset, n, rng, range_batch=range_batch)
    elif sampler == "permute":
        s_fp = sample_fp_permute(model, dataset, n, rng)
    else:
        raise ValueError(f"unknown FP sampler {sampler!r}")
    return SampleSets(s_ep, s_fp, sampler)


def split_sets(n: int, train_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class index split; both classes contribute the same count to each side."""
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    perm = rng.permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def train_metric_discriminator(x_train: np.ndarray, y_train: np.ndarray, config: PipeConfig, seed: int):
    """Fresh encoder-shaped discriminator trained with hard labels."""
    net = NetworkConfig(z_dim=1, input_shape=x_train.shape[1:])
    g = torch.Generator().manual_seed(int(seed))
    dis = vae_core.initialize(vae_core.Discriminator(net, instance_norm=False), g)
    opt = torch.optim.Adam(dis.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    X = vae_core.to_tensor(x_train)
    y = torch.as_tensor(y_train, dtype=torch.float32)
    order, pos = rng.permutation(len(X)), 0
    for step in range(config.steps):
        if pos + config.batch_size > len(order):
            order, pos = rng.permutation(len(X)), 0
        idx = torch.as_tensor(order[pos:pos + config.batch_size])
        pos += config.batch_size
        loss = F.binary_cross_entropy_with_logits(dis(X[idx]), y[idx])
        if not math.isfinite(float(loss.detach())):
            raise FloatingPointError(f"metric discriminator loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return dis


@torch.no_grad()
def _logits(dis, images: np.ndarray, chunk: int) -> torch.Tensor:
    return torch.cat([dis(vae_core.to_tensor(images[sl])) for sl in _chunks(len(images), chunk)])


def pipe_from_sets(sets: SampleSets, config: PipeConfig, seed: int) -> PipeResult:
    rng = np.random.default_rng([seed, 1])
    n = len(sets.s_ep)
    train_idx, test_idx = split_sets(n, config.train_fraction, rng)
    ep, fp = sets.s_ep.images, sets.s_fp.images
    x_train = np.concatenate([ep[train_idx], fp[train_idx]])
    y_train = np.concatenate([np.ones(len(train_idx)), np.zeros(len(train_idx))])
    dis = train_metric_discriminator(x_train, y_train, config, seed)
    acc = discriminator_accuracy(_logits(dis, ep[test_idx], config.chunk), _logits(dis, fp[test_idx], config.chunk))
    return PipeResult(pipe_score(acc), acc, 2 * len(train_idx), 2 * len(test_idx), sets.provenance, seed)


def pipe(model, dataset: GroundTruthDataset, config: PipeConfig | None = None, seed: int = 0) -> PipeResult:
    """PIPE score 2 * (1 - test accuracy); 1 is indistinguishable, 0 perfectly separable."""
    config = config or PipeConfig()
    rng = np.random.default_rng(seed)
    sets = build_sample_sets(model, dataset, config.set_size, rng, config.fp_sampler, config.range_batch)
    return pipe_from_sets(sets, config, seed)


def pipe_rec(pipe_score: float, rec: float, population, alpha: float) -> float:
    """PIPE minus alpha times the reconstruction error min-max normalized over ``population``."""
    population = np.asarray(list(population), dtype=np.float64)
    if population.size == 0:
        raise ValueError("population of reconstruction errors is empty")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    lo, hi = population.min(), population.max()
    rec_norm = 0.0 if hi == lo else (rec - lo) / (hi - lo)
    return pipe_score - alpha * rec_norm


def is_collapsed(model, rng=0, n: int = 64, threshold: float = 1e-8) -> bool:
    """True when decoded images barely vary across n prior draws."""
    rng = as_rng(rng)
    z = rng.standard_normal((n, model.z_dim))
    images = np.asarray(model.decode(z), np.float64)
    return float(images.var(axis=0).mean()) < threshold
