"""Encoder, decoder and discriminator networks plus the analytic VAE loss terms.

Images travel through the public API as NHWC float arrays in [0, 1]; the
torch modules work in NCHW internally.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

INIT_SCHEME = "he_uniform_fan_in/zero_bias"
CHECKPOINT_VERSION = "dava-lab-checkpoint/1"
BCE_CLIP = 1e-6

CONV_CHANNELS = (32, 32, 64, 64)
HIDDEN = 256
KERNEL = 4


@dataclass(frozen=True)
class NetworkConfig:
    z_dim: int = 10
    input_shape: tuple[int, int, int] = (64, 64, 1)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        h, w, c = self.input_shape
        if self.z_dim < 1:
            raise ValueError(f"z_dim must be >= 1, got {self.z_dim}")
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ValueError(f"input sides must be positive multiples of 16, got {h}x{w}")
        if c < 1:
            raise ValueError("need at least one channel")

    @property
    def bottleneck(self) -> tuple[int, int]:
        h, w, _ = self.input_shape
        return h // 16, w // 16


def _conv_ladder(channels_in: int, instance_norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    c_prev = channels_in
    for c in CONV_CHANNELS:
        layers.append(nn.Conv2d(c_prev, c, KERNEL, stride=2, padding=1))
        if instance_norm:
            layers.append(nn.InstanceNorm2d(c))
        layers.append(nn.ReLU())
        c_prev = c
    layers.append(nn.Flatten())
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        bh, bw = config.bottleneck
        self.features = _conv_ladder(config.input_shape[2], instance_norm=False)
        self.fc = nn.Linear(CONV_CHANNELS[-1] * bh * bw, HIDDEN)
        self.head = nn.Linear(HIDDEN, 2 * config.z_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.relu(self.fc(self.features(x)))
        mean, log_var = self.head(h).chunk(2, dim=1)
        return mean, log_var


class Decoder(nn.Module):
    """Returns logits; ``torch.sigmoid`` of the output gives pixel means."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        bh, bw = config.bottleneck
        c_out = config.input_shape[2]
        self.fc1 = nn.Linear(config.z_dim, HIDDEN)
        self.fc2 = nn.Linear(HIDDEN, 64 * bh * bw)
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(64, 64, KERNEL, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(64, 64, KERNEL, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(64, 64, KERNEL, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(64, c_out, KERNEL, stride=2, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        bh, bw = self.config.bottleneck
        h = F.relu(self.fc2(F.relu(self.fc1(z))))
        return self.deconv(h.view(-1, 64, bh, bw))


class Discriminator(nn.Module):
    """Encoder conv ladder with a single-logit head."""

    def __init__(self, config: NetworkConfig, instance_norm: bool = True):
        super().__init__()
        self.config = config
        bh, bw = config.bottleneck
        if instance_norm and bh * bw < 2:
            # instance norm over a 1x1 map zeroes every feature
            raise ValueError("an instance-normalized discriminator needs inputs of at least 32 px per side")
        self.features = _conv_ladder(config.input_shape[2], instance_norm=instance_norm)
        self.fc = nn.Linear(CONV_CHANNELS[-1] * bh * bw, HIDDEN)
        self.head = nn.Linear(HIDDEN, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(F.relu(self.fc(self.features(x)))).squeeze(1)


def _fan_in(module: nn.Module) -> float:
    w = module.weight
    if isinstance(module, nn.ConvTranspose2d):
        s = module.stride[0] * module.stride[1]
        return w.shape[0] * w.shape[2] * w.shape[3] / s
    if isinstance(module, nn.Conv2d):
        return w.shape[1] * w.shape[2] * w.shape[3]
    return w.shape[1]


@torch.no_grad()
def initialize(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """He-uniform weights scaled by fan-in, zero biases; order follows ``modules()``."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            bound = math.sqrt(6.0 / _fan_in(m))
            m.weight.uniform_(-bound, bound, generator=generator)
            if m.bias is not None:
                m.bias.zero_()
    return module


def build_networks(config: NetworkConfig, seed: int, discriminator: bool = True):
    """Encoder, decoder and (optionally) discriminator initialized from one seed."""
    g = torch.Generator().manual_seed(int(seed))
    enc = initialize(Encoder(config), g)
    dec = initialize(Decoder(config), g)
    dis = initialize(Discriminator(config), g) if discriminator else None
    return enc, dec, dis


# --------------------------------------------------------------------------
# array <-> tensor helpers

def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """NHWC array to NCHW tensor."""
    return torch.as_tensor(np.asarray(images), dtype=dtype).permute(0, 3, 1, 2).contiguous()


def to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


def _check_input(x: torch.Tensor, config: NetworkConfig):
    h, w, c = config.input_shape
    if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w):
        raise ValueError(f"expected images of shape (n, {h}, {w}, {c}), got {tuple(x.permute(0, 2, 3, 1).shape) if x.ndim == 4 else tuple(x.shape)}")


def encode(encoder: Encoder, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Posterior mean and log-variance for an NCHW batch."""
    _check_input(x, encoder.config)
    return encoder(x)


def reparameterize(mean, log_var, noise):
    """z = mean + exp(log_var / 2) * noise, elementwise; works on tensors and arrays."""
    if isinstance(mean, torch.Tensor):
        return mean + torch.exp(0.5 * log_var) * noise
    return np.asarray(mean) + np.exp(0.5 * np.asarray(log_var)) * np.asarray(noise)


def decode(decoder: Decoder, z: torch.Tensor) -> torch.Tensor:
    """Pixel means in (0, 1), NCHW."""
    if z.ndim != 2 or z.shape[1] != decoder.config.z_dim:
        raise ValueError(f"expected latents of shape (n, {decoder.config.z_dim}), got {tuple(z.shape)}")
    return torch.sigmoid(decoder(z))


# --------------------------------------------------------------------------
# losses

def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Bernoulli cross-entropy summed over pixels, averaged over the batch (nats)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    with torch.no_grad():
        if x.min() < 0 or x.max() > 1 or x_hat.min() < 0 or x_hat.max() > 1:
            raise ValueError("reconstruction_loss expects values in [0, 1]")
    p = x_hat.clamp(BCE_CLIP, 1 - BCE_CLIP)
    ce = -(x * torch.log(p) + (1 - x) * torch.log1p(-p))
    return ce.flatten(1).sum(1).mean()


def pixel_mse(x, x_hat) -> float:
    """Per-pixel mean squared error, the reported Rec statistic."""
    if isinstance(x, torch.Tensor):
        return float(((x - x_hat) ** 2).mean())
    return float(np.mean((np.asarray(x, np.float64) - np.asarray(x_hat, np.float64)) ** 2))


def kl_divergence(mean: torch.Tensor, log_var: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """KL(q(z|x) || N(0, I)) in nats.

    Returns the batch-mean per-dimension KL (length z_dim) and its sum.
    """
    if not (torch.isfinite(mean).all() and torch.isfinite(log_var).all()):
        raise ValueError("kl_divergence got non-finite inputs")
    # expm1 keeps exp(v) - 1 - v >= 0 for tiny v, where the naive form cancels below zero
    kl = 0.5 * (mean ** 2 + (torch.expm1(log_var) - log_var))
    per_dim = kl.mean(0) if kl.ndim == 2 else kl
    return per_dim, per_dim.sum()


def capacity_loss(kl_total, C: float, exponent: int = 4):
    """|KL - C| for exponent 1, (KL - C)^4 for exponent 4."""
    if C < 0:
        raise ValueError(f"capacity must be non-negative, got {C}")
    if exponent == 1:
        return abs(kl_total - C)
    if exponent == 4:
        return (kl_total - C) ** 4
    raise ValueError(f"exponent must be 1 or 4, got {exponent}")


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | os.PathLike, modules: dict[str, nn.Module], config: NetworkConfig,
                    seed: int, extra: dict | None = None, tensors: dict[str, torch.Tensor] | None = None) -> Path:
    """Write raw float32 parameter blocks, an offset manifest and key=value config.

    ``tensors`` holds additional named float tensors (e.g. optimizer moments)
    stored in the same block.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    named: list[tuple[str, torch.Tensor]] = []
    for prefix, module in modules.items():
        if module is None:
            continue
        for name, t in module.state_dict().items():
            named.append((f"{prefix}.{name}", t))
    for name, t in (tensors or {}).items():
        named.append((name, t))

    offset = 0
    lines = []
    with open(path / "params.f32", "wb") as fh:
        for name, t in named:
            arr = t.detach().cpu().numpy().astype("<f4")
            fh.write(arr.tobytes())
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name} {shape} {offset}")
            offset += arr.size
    (path / "params.manifest").write_text("\n".join(lines) + "\n")

    h, w, c = config.input_shape
    cfg = {
        "version": CHECKPOINT_VERSION,
        "z_dim": config.z_dim,
        "height": h,
        "width": w,
        "channels": c,
        "init_scheme": INIT_SCHEME,
        "seed": seed,
        **(extra or {}),
    }
    (path / "config.txt").write_text("".join(f"{k}={v}\n" for k, v in cfg.items()))
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[NetworkConfig, dict[str, str], dict[str, torch.Tensor]]:
    path = Path(path)
    cfg = {}
    for line in (path / "config.txt").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            cfg[k] = v
    if cfg.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {cfg.get('version')!r}")
    net = NetworkConfig(int(cfg["z_dim"]), (int(cfg["height"]), int(cfg["width"]), int(cfg["channels"])))
    block = np.fromfile(path / "params.f32", dtype="<f4")
    tensors = {}
    for line in (path / "params.manifest").read_text().splitlines():
        if not line.strip():
            continue
        name, shape, offset = line.split()
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        size = int(np.prod(dims)) if dims else 1
        start = int(offset)
        tensors[name] = torch.from_numpy(block[start:start + size].reshape(dims).copy())
    return net, cfg, tensors


def load_modules(tensors: dict[str, torch.Tensor], modules: dict[str, nn.Module]) -> None:
    for prefix, module in modules.items():
        if module is None:
            continue
        sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        module.load_state_dict(sub)
