"""DAVA training loop with accuracy-driven capacity and adversarial weighting.

One ``train_step`` runs, in order: the VAE update against the capacity
target, a fresh encode/decode pass, the discriminator update on
reconstructed vs. dimension-permuted samples, the capacity update and the
accuracy-weighted adversarial update of encoder and decoder.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import vae_core
from .synthdata import ObservationBatch
from .vae_core import NetworkConfig

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: "StepDiagnostics"):
        super().__init__(f"{message}\n{diagnostics}")
        self.diagnostics = diagnostics


def _check_fields(cls, d: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} key(s): {sorted(unknown)}")


@dataclass
class DavaConfig:
    gamma: float = 500.0
    delta_C: float = 4e-5
    mu_enc: float = 0.3
    mu_dec: float = 0.001
    batch_size: int = 128
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_grad_norm: float = 1.0
    total_steps: int = 150_000
    label_smoothing: float = 0.1
    grace_band: float = 0.51
    capacity_exponent: int = 4
    z_dim: int = 10
    dis_learning_rate: float = 1e-4
    dis_adam_beta1: float = 0.9
    dis_adam_beta2: float = 0.999
    dis_adam_epsilon: float = 1e-8
    trajectory_every: int = 100
    diagnostics_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "dis_learning_rate", "delta_C", "max_grad_norm", "adam_epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("gamma", "mu_enc", "mu_dec"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.5 < self.grace_band <= 1:
            raise ValueError("grace_band must lie in (0.5, 1]")
        if not 0 <= self.label_smoothing < 0.5:
            raise ValueError("label_smoothing must lie in [0, 0.5)")
        if self.batch_size < 2 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 2 and total_steps >= 0")
        if self.capacity_exponent not in (1, 4):
            raise ValueError("capacity_exponent must be 1 or 4")

    @classmethod
    def from_dict(cls, d: dict) -> "DavaConfig":
        _check_fields(cls, d)
        return cls(**d)


@dataclass
class BetaVAEConfig:
    beta: float = 1.0
    batch_size: int = 128
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_grad_norm: float = 1.0
    total_steps: int = 150_000
    z_dim: int = 10
    diagnostics_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ValueError("learning_rate and max_grad_norm must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "BetaVAEConfig":
        _check_fields(cls, d)
        return cls(**d)


@dataclass
class StepDiagnostics:
    step: int
    recon: float
    kl_total: float
    kl_per_dim: np.ndarray
    capacity_loss: float
    accuracy: float
    mu_base: float
    C: float
    pixel_mse: float
    dis_loss: float
    grad_norms: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainState:
    encoder: vae_core.Encoder
    decoder: vae_core.Decoder
    discriminator: vae_core.Discriminator | None
    vae_optimizer: torch.optim.Optimizer
    dis_optimizer: torch.optim.Optimizer | None
    generator: torch.Generator
    rng: np.random.Generator
    seed: int
    C: float = 0.0
    # C is always capacity_units * delta_C; counting units keeps it free of rounding drift
    capacity_units: int = 0
    step: int = 0
    c_trajectory: list[tuple[int, float]] = field(default_factory=list)
    diagnostics: list[StepDiagnostics] = field(default_factory=list)

    @property
    def network_config(self) -> NetworkConfig:
        return self.encoder.config

    def modules(self) -> dict[str, nn.Module | None]:
        return {"encoder": self.encoder, "decoder": self.decoder, "discriminator": self.discriminator}


def _adam(params, lr, b1, b2, eps):
    return torch.optim.Adam(params, lr=lr, betas=(b1, b2), eps=eps)


def init_state(network: NetworkConfig, config: DavaConfig | BetaVAEConfig, seed: int) -> TrainState:
    adversarial = isinstance(config, DavaConfig)
    enc, dec, dis = vae_core.build_networks(network, seed, discriminator=adversarial)
    vae_opt = _adam(list(enc.parameters()) + list(dec.parameters()), config.learning_rate,
                    config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    dis_opt = None
    if adversarial:
        dis_opt = _adam(dis.parameters(), config.dis_learning_rate, config.dis_adam_beta1,
                        config.dis_adam_beta2, config.dis_adam_epsilon)
    return TrainState(
        encoder=enc, decoder=dec, discriminator=dis, vae_optimizer=vae_opt, dis_optimizer=dis_opt,
        generator=torch.Generator().manual_seed(int(seed) + 1),
        rng=np.random.default_rng(int(seed)), seed=int(seed),
    )


# --------------------------------------------------------------------------
# building blocks

def permute_dims(z, rng):
    """Shuffle each latent column independently across the batch.

    ``rng`` is a ``torch.Generator`` for tensors or a numpy ``Generator``
    for arrays.
    """
    if isinstance(z, torch.Tensor):
        n, d = z.shape
        if n < 1:
            raise ValueError("permute_dims needs a non-empty batch")
        idx = torch.argsort(torch.rand(n, d, generator=rng), dim=0)
        return torch.gather(z, 0, idx)
    z = np.asarray(z)
    if z.shape[0] < 1:
        raise ValueError("permute_dims needs a non-empty batch")
    return rng.permuted(z, axis=0)


def mu_base(acc: float) -> float:
    return max((acc - 0.5) * 100.0, 0.0)


def update_capacity(acc: float, C: float, delta_C: float, grace_band: float = 0.51) -> float:
    if acc <= 0.5:
        return C + delta_C
    if acc <= grace_band:
        return C
    return max(C - delta_C, 0.0)


def update_capacity_units(acc: float, units: int, grace_band: float = 0.51) -> int:
    """``update_capacity`` counted in whole multiples of delta_C."""
    if acc <= 0.5:
        return units + 1
    if acc <= grace_band:
        return units
    return max(units - 1, 0)


def discriminator_accuracy(logits_ep: torch.Tensor, logits_fp: torch.Tensor) -> float:
    """Hard-label accuracy at p = 0.5; exact ties score one half."""
    def score(logits, positive):
        right = (logits > 0) if positive else (logits < 0)
        tie = logits == 0
        return right.double().sum() + 0.5 * tie.double().sum()

    total = score(logits_ep, True) + score(logits_fp, False)
    return float(total / (len(logits_ep) + len(logits_fp)))


def discriminator_loss(logits_ep: torch.Tensor, logits_fp: torch.Tensor, label_smoothing: float = 0.0) -> torch.Tensor:
    """Binary cross-entropy on the mixed batch; reconstructions are the positive class."""
    logits = torch.cat([logits_ep, logits_fp])
    targets = torch.cat([
        torch.full_like(logits_ep, 1.0 - label_smoothing),
        torch.full_like(logits_fp, label_smoothing),
    ])
    return F.binary_cross_entropy_with_logits(logits, targets)


def _grad_norm(params) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))


def _clip(params, max_norm) -> tuple[float, float]:
    params = [p for p in params if p.grad is not None]
    pre = float(nn.utils.clip_grad_norm_(params, max_norm))
    return pre, _grad_norm(params)


def _noise_like(t: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    return torch.randn(t.shape, generator=generator, dtype=t.dtype)


def _check_finite(value: float, what: str, diag: StepDiagnostics):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} at step {diag.step}", diag)


# --------------------------------------------------------------------------
# steps

def adversarial_update(state: TrainState, x_hat: torch.Tensor, w_enc: float, w_dec: float, max_grad_norm: float,
                       norms: dict[str, float] | None = None) -> None:
    """Encoder descends w_enc * log Dis(x_hat), decoder descends w_dec * log(1 - Dis(x_hat)).

    Signs follow the reference algorithm verbatim, so the two terms push
    Dis(x_hat) in opposite directions.  ``x_hat`` must still carry its graph
    to the encoder and decoder.  No-op when both weights are zero.
    """
    if not (w_enc > 0 or w_dec > 0):
        return
    norms = {} if norms is None else norms
    enc_params, dec_params = list(state.encoder.parameters()), list(state.decoder.parameters())
    d_hat = state.discriminator(x_hat)
    state.vae_optimizer.zero_grad(set_to_none=True)
    if w_enc > 0:
        grads = torch.autograd.grad(w_enc * F.logsigmoid(d_hat).mean(), enc_params, retain_graph=w_dec > 0)
        for p, g in zip(enc_params, grads):
            p.grad = g
        norms["adv_enc_pre_clip"], norms["adv_enc"] = _clip(enc_params, max_grad_norm)
    if w_dec > 0:
        grads = torch.autograd.grad(w_dec * F.logsigmoid(-d_hat).mean(), dec_params)
        for p, g in zip(dec_params, grads):
            p.grad = g
        norms["adv_dec_pre_clip"], norms["adv_dec"] = _clip(dec_params, max_grad_norm)
    state.vae_optimizer.step()
    for p in state.discriminator.parameters():
        p.grad = None


def train_step(state: TrainState, batch: ObservationBatch | np.ndarray, config: DavaConfig,
               accuracy_fn: Callable[[torch.Tensor, torch.Tensor], float] = discriminator_accuracy,
               ) -> tuple[TrainState, StepDiagnostics]:
    """One DAVA update; mutates and returns ``state``.

    ``accuracy_fn`` maps (EP logits, FP logits) to the accuracy that drives
    the capacity and adversarial schedules; override it to pin the schedule.
    """
    images = batch.images if isinstance(batch, ObservationBatch) else batch
    x = vae_core.to_tensor(images)
    enc, dec, dis = state.encoder, state.decoder, state.discriminator
    vae_params = list(enc.parameters()) + list(dec.parameters())
    norms: dict[str, float] = {}

    # (1) VAE update towards the capacity target
    mean, log_var = enc(x)
    z = vae_core.reparameterize(mean, log_var, _noise_like(mean, state.generator))
    x_hat = vae_core.decode(dec, z)
    recon = vae_core.reconstruction_loss(x, x_hat)
    kl_per_dim, kl_total = vae_core.kl_divergence(mean, log_var)
    cap = vae_core.capacity_loss(kl_total, state.C, config.capacity_exponent)
    loss = recon + config.gamma * cap if config.gamma > 0 else recon
    state.vae_optimizer.zero_grad(set_to_none=True)
    loss.backward()
    norms["vae_pre_clip"], norms["vae"] = _clip(vae_params, config.max_grad_norm)

    diag = StepDiagnostics(
        step=state.step + 1, recon=float(recon.detach()), kl_total=float(kl_total.detach()),
        kl_per_dim=kl_per_dim.detach().numpy().copy(), capacity_loss=float(cap.detach()),
        accuracy=float("nan"), mu_base=0.0, C=state.C, pixel_mse=vae_core.pixel_mse(x, x_hat.detach()),
        dis_loss=float("nan"), grad_norms=norms,
    )
    _check_finite(float(loss.detach()), "VAE loss", diag)
    state.vae_optimizer.step()

    # (2) recreate z and x_hat after the update; keep the graph for step (7)
    mean, log_var = enc(x)
    z = vae_core.reparameterize(mean, log_var, _noise_like(mean, state.generator))
    x_hat = vae_core.decode(dec, z)
    # (3) generated samples from the permuted latents
    with torch.no_grad():
        x_tilde = vae_core.decode(dec, permute_dims(z.detach(), state.generator))

    # (4) accuracy of the pre-update discriminator, (5) discriminator update
    n = len(x)
    logits = dis(torch.cat([x_hat.detach(), x_tilde]))
    logits_ep, logits_fp = logits[:n], logits[n:]
    acc = float(accuracy_fn(logits_ep.detach(), logits_fp.detach()))
    dis_loss = discriminator_loss(logits_ep, logits_fp, config.label_smoothing)
    diag.accuracy, diag.dis_loss = acc, float(dis_loss.detach())
    _check_finite(diag.dis_loss, "discriminator loss", diag)
    state.dis_optimizer.zero_grad(set_to_none=True)
    dis_loss.backward()
    norms["dis_pre_clip"], norms["dis"] = _clip(list(dis.parameters()), config.max_grad_norm)
    state.dis_optimizer.step()

    # (6) capacity
    state.capacity_units = update_capacity_units(acc, state.capacity_units, config.grace_band)
    state.C = state.capacity_units * config.delta_C
    base = mu_base(acc)
    diag.C, diag.mu_base = state.C, base

    # (7) adversarial update
    adversarial_update(state, x_hat, base * config.mu_enc, base * config.mu_dec, config.max_grad_norm, norms)

    state.step += 1
    return state, diag


def beta_vae_step(state: TrainState, batch: ObservationBatch | np.ndarray, config: BetaVAEConfig,
                  ) -> tuple[TrainState, StepDiagnostics]:
    images = batch.images if isinstance(batch, ObservationBatch) else batch
    x = vae_core.to_tensor(images)
    params = list(state.encoder.parameters()) + list(state.decoder.parameters())
    mean, log_var = state.encoder(x)
    z = vae_core.reparameterize(mean, log_var, _noise_like(mean, state.generator))
    x_hat = vae_core.decode(state.decoder, z)
    recon = vae_core.reconstruction_loss(x, x_hat)
    kl_per_dim, kl_total = vae_core.kl_divergence(mean, log_var)
    loss = recon + config.beta * kl_total
    state.vae_optimizer.zero_grad(set_to_none=True)
    loss.backward()
    norms = {}
    norms["vae_pre_clip"], norms["vae"] = _clip(params, config.max_grad_norm)
    diag = StepDiagnostics(
        step=state.step + 1, recon=float(recon.detach()), kl_total=float(kl_total.detach()),
        kl_per_dim=kl_per_dim.detach().numpy().copy(), capacity_loss=0.0, accuracy=float("nan"),
        mu_base=0.0, C=0.0, pixel_mse=vae_core.pixel_mse(x, x_hat.detach()), dis_loss=float("nan"),
        grad_norms=norms,
    )
    _check_finite(float(loss.detach()), "VAE loss", diag)
    state.vae_optimizer.step()
    state.step += 1
    return state, diag


# --------------------------------------------------------------------------
# loops

def _optimizer_tensors(name: str, opt: torch.optim.Optimizer, module_params: dict[int, str]) -> dict[str, torch.Tensor]:
    out = {}
    for p, st in opt.state.items():
        pname = module_params[id(p)]
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                out[f"{name}.{pname}.{key}"] = st[key]
        if "step" in st:
            out[f"{name}.{pname}.step"] = torch.as_tensor(st["step"], dtype=torch.float32)
    return out


def save_state(state: TrainState, path: str | os.PathLike, architecture: str, extra: dict | None = None) -> Path:
    """Checkpoint every network and optimizer moment plus C, step and RNG state."""
    module_params = {}
    for prefix, module in state.modules().items():
        if module is not None:
            for n, p in module.named_parameters():
                module_params[id(p)] = f"{prefix}.{n}"
    tensors = _optimizer_tensors("vae_optimizer", state.vae_optimizer, module_params)
    if state.dis_optimizer is not None:
        tensors.update(_optimizer_tensors("dis_optimizer", state.dis_optimizer, module_params))
    extra = {
        "architecture": architecture,
        "step": state.step,
        "capacity": repr(state.C),
        "capacity_units": state.capacity_units,
        "torch_rng": state.generator.get_state().numpy().tobytes().hex(),
        **(extra or {}),
    }
    return vae_core.save_checkpoint(path, state.modules(), state.network_config, state.seed, extra, tensors)


def load_networks(path: str | os.PathLike):
    """Encoder, decoder, discriminator (or None) and the raw config entries of a checkpoint."""
    net, cfg, tensors = vae_core.read_checkpoint(path)
    has_dis = any(k.startswith("discriminator.") for k in tensors)
    enc, dec, dis = vae_core.build_networks(net, int(cfg["seed"]), discriminator=has_dis)
    vae_core.load_modules(tensors, {"encoder": enc, "decoder": dec, "discriminator": dis})
    return enc, dec, dis, cfg


def _write_csv(path: Path, header: list[str], rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def write_run_outputs(state: TrainState, out_dir: str | os.PathLike) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "c_trajectory.csv", ["step", "C"], state.c_trajectory)
    _write_csv(out_dir / "diagnostics.csv", ["step", "recon", "kl", "acc", "mu_base"],
               [(d.step, d.recon, d.kl_total, d.accuracy, d.mu_base) for d in state.diagnostics])


def _network_for(dataset, z_dim: int) -> NetworkConfig:
    return NetworkConfig(z_dim=z_dim, input_shape=tuple(dataset.image_shape))


def train(dataset, config: DavaConfig, seed: int, out_dir: str | os.PathLike | None = None,
          accuracy_fn=discriminator_accuracy, state: TrainState | None = None) -> tuple[TrainState, list]:
    """Run ``config.total_steps`` DAVA steps on fresh batches from ``dataset``.

    ``dataset`` needs ``image_shape`` and ``sample_random(n, rng)``.  The
    capacity trajectory is recorded every ``trajectory_every`` steps.
    """
    if state is None:
        state = init_state(_network_for(dataset, config.z_dim), config, seed)
    if state.step == 0 and not state.c_trajectory:
        state.c_trajectory.append((0, state.C))
    while state.step < config.total_steps:
        batch = dataset.sample_random(config.batch_size, state.rng)
        state, diag = train_step(state, batch, config, accuracy_fn=accuracy_fn)
        if state.step % config.trajectory_every == 0:
            state.c_trajectory.append((state.step, state.C))
        if state.step % config.diagnostics_every == 0:
            state.diagnostics.append(diag)
            if state.step % (config.diagnostics_every * 50) == 0:
                logger.info("dava step %d recon %.2f kl %.3f C %.4f acc %.3f", state.step, diag.recon,
                            diag.kl_total, state.C, diag.accuracy)
        if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_state(state, Path(out_dir) / "checkpoint", "dava")
    if out_dir is not None:
        save_state(state, Path(out_dir) / "checkpoint", "dava")
        write_run_outputs(state, out_dir)
    return state, state.c_trajectory


def train_beta_vae(dataset, config: BetaVAEConfig, seed: int, out_dir: str | os.PathLike | None = None,
                   state: TrainState | None = None) -> TrainState:
    """Plain beta-VAE: Bernoulli reconstruction + beta * KL, same optimizer and clipping."""
    if state is None:
        state = init_state(_network_for(dataset, config.z_dim), config, seed)
    while state.step < config.total_steps:
        batch = dataset.sample_random(config.batch_size, state.rng)
        state, diag = beta_vae_step(state, batch, config)
        if state.step % config.diagnostics_every == 0:
            state.diagnostics.append(diag)
            if state.step % (config.diagnostics_every * 50) == 0:
                logger.info("beta-vae step %d recon %.2f kl %.3f", state.step, diag.recon, diag.kl_total)
        if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_state(state, Path(out_dir) / "checkpoint", "beta_vae")
    if out_dir is not None:
        save_state(state, Path(out_dir) / "checkpoint", "beta_vae")
        write_run_outputs(state, out_dir)
    return state
