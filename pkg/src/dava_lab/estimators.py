"""scikit-learn style wrappers around the training loops.

``fit`` takes images (n, H, W, C) in [0, 1] or a ``GroundTruthDataset``;
``transform`` returns posterior means and ``inverse_transform`` decodes.
The fitted estimators satisfy the encode/decode protocol used by the
metrics.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dava_train, vae_core
from ._validation import check_images, check_latents
from .synthdata import GroundTruthDataset, ObservationBatch


class ImageArray:
    """Uniform minibatch source over a fixed array of images."""

    def __init__(self, images: np.ndarray):
        self.images = check_images(images)
        self.image_shape = tuple(self.images.shape[1:])

    def __len__(self):
        return len(self.images)

    def sample_random(self, n: int, rng: np.random.Generator) -> ObservationBatch:
        return ObservationBatch(self.images[rng.integers(0, len(self.images), size=n)])


def _as_source(X):
    if isinstance(X, GroundTruthDataset) or hasattr(X, "sample_random"):
        return X
    return ImageArray(X)


class _VAEMixin(TransformerMixin):
    chunk_size = 512

    @property
    def input_shape(self):
        return self.network_config_.input_shape

    def _check_fitted(self, attribute: str) -> None:
        check_is_fitted(self, attribute)

    def encode(self, X):
        """Posterior mean and log-variance arrays."""
        self._check_fitted("encoder_")
        X = check_images(X, self.network_config_.input_shape)
        means, log_vars = [], []
        with torch.no_grad():
            for i in range(0, len(X), self.chunk_size):
                m, lv = self.encoder_(vae_core.to_tensor(X[i:i + self.chunk_size]))
                means.append(m.numpy())
                log_vars.append(lv.numpy())
        return np.concatenate(means).astype(np.float64), np.concatenate(log_vars).astype(np.float64)

    def decode(self, Z):
        self._check_fitted("decoder_")
        Z = check_latents(Z, self.z_dim)
        out = []
        with torch.no_grad():
            for i in range(0, len(Z), self.chunk_size):
                z = torch.as_tensor(Z[i:i + self.chunk_size], dtype=torch.float32)
                out.append(vae_core.to_images(vae_core.decode(self.decoder_, z)))
        return np.concatenate(out)

    def transform(self, X):
        return self.encode(X)[0]

    def inverse_transform(self, Z):
        return self.decode(Z)

    def reconstruct(self, X):
        return self.decode(self.transform(X))

    def reconstruction_error(self, X) -> float:
        """Per-pixel MSE of mean reconstructions."""
        X = check_images(X, self.network_config_.input_shape)
        return vae_core.pixel_mse(X, self.reconstruct(X))

    def _set_fitted(self, state: dava_train.TrainState):
        self.state_ = state
        self.encoder_ = state.encoder.eval()
        self.decoder_ = state.decoder.eval()
        self.network_config_ = state.network_config
        self.n_steps_ = state.step
        self.diagnostics_ = state.diagnostics

    def save(self, path: str | os.PathLike) -> Path:
        self._check_fitted("state_")
        return dava_train.save_state(self.state_, path, self._architecture)


class DAVA(_VAEMixin, BaseEstimator):
    """Adversarial VAE whose KL capacity and adversarial weight follow discriminator accuracy.

    Parameters mirror :class:`dava_lab.dava_train.DavaConfig`.
    """

    _architecture = "dava"

    def __init__(self, z_dim=10, gamma=500.0, delta_C=4e-5, mu_enc=0.3, mu_dec=0.001, batch_size=128,
                 learning_rate=1e-4, max_grad_norm=1.0, total_steps=150_000, label_smoothing=0.1,
                 grace_band=0.51, capacity_exponent=4, random_state=0):
        self.z_dim = z_dim
        self.gamma = gamma
        self.delta_C = delta_C
        self.mu_enc = mu_enc
        self.mu_dec = mu_dec
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_grad_norm = max_grad_norm
        self.total_steps = total_steps
        self.label_smoothing = label_smoothing
        self.grace_band = grace_band
        self.capacity_exponent = capacity_exponent
        self.random_state = random_state

    def config(self) -> dava_train.DavaConfig:
        return dava_train.DavaConfig(
            gamma=self.gamma, delta_C=self.delta_C, mu_enc=self.mu_enc, mu_dec=self.mu_dec,
            batch_size=self.batch_size, learning_rate=self.learning_rate, dis_learning_rate=self.learning_rate,
            max_grad_norm=self.max_grad_norm, total_steps=self.total_steps, label_smoothing=self.label_smoothing,
            grace_band=self.grace_band, capacity_exponent=self.capacity_exponent, z_dim=self.z_dim,
        )

    def fit(self, X, y=None, out_dir=None):
        state, trajectory = dava_train.train(_as_source(X), self.config(), int(self.random_state or 0), out_dir=out_dir)
        self._set_fitted(state)
        self.c_trajectory_ = np.asarray(trajectory, dtype=np.float64)
        self.capacity_ = state.C
        return self


class BetaVAE(_VAEMixin, BaseEstimator):
    """Bernoulli-likelihood VAE with the KL term weighted by ``beta``."""

    _architecture = "beta_vae"

    def __init__(self, z_dim=10, beta=1.0, batch_size=128, learning_rate=1e-4, max_grad_norm=1.0,
                 total_steps=150_000, random_state=0):
        self.z_dim = z_dim
        self.beta = beta
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_grad_norm = max_grad_norm
        self.total_steps = total_steps
        self.random_state = random_state

    def config(self) -> dava_train.BetaVAEConfig:
        return dava_train.BetaVAEConfig(
            beta=self.beta, batch_size=self.batch_size, learning_rate=self.learning_rate,
            max_grad_norm=self.max_grad_norm, total_steps=self.total_steps, z_dim=self.z_dim,
        )

    def fit(self, X, y=None, out_dir=None):
        state = dava_train.train_beta_vae(_as_source(X), self.config(), int(self.random_state or 0), out_dir=out_dir)
        self._set_fitted(state)
        return self


class LoadedVAE(_VAEMixin):
    """Encoder/decoder restored from a checkpoint directory."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        enc, dec, dis, cfg = dava_train.load_networks(self.path)
        self.encoder_, self.decoder_, self.discriminator_ = enc.eval(), dec.eval(), dis
        self.network_config_ = enc.config
        self.architecture = cfg.get("architecture", "unknown")
        self.seed = int(cfg["seed"])
        self.capacity_ = float(cfg["capacity"]) if "capacity" in cfg else None
        self.n_steps_ = int(cfg.get("step", 0))

    @property
    def z_dim(self) -> int:
        return self.network_config_.z_dim

    def _check_fitted(self, attribute: str) -> None:
        if not hasattr(self, attribute):
            raise AttributeError(f"checkpoint model has no {attribute}")


def load(path: str | os.PathLike) -> LoadedVAE:
    return LoadedVAE(path)
