"""Hand-built encoder/decoder pairs with known disentanglement.

They follow the same ``encode`` / ``decode`` protocol as the trained
estimators, so samplers and metrics cannot tell them apart.
"""
from __future__ import annotations

import numpy as np

from ._validation import as_rng, check_images, check_latents
from .synthdata import GroundTruthDataset

# log-variance standing in for a zero-width posterior
POINT_MASS_LOG_VAR = -80.0


class FactorOracle:
    """Latents are the normalized ground-truth factor values; the decoder is the renderer.

    With ``duplicate=k`` an extra latent repeats factor ``k``.  The decoder
    then draws a second sprite from the copy and keeps the pixelwise
    maximum, so codes whose two copies disagree decode to two-sprite
    composites that never occur in the data.
    """

    def __init__(self, dataset: GroundTruthDataset, duplicate: int | None = None):
        self.dataset = dataset
        self.duplicate = duplicate
        if duplicate is not None and not 0 <= duplicate < dataset.num_factors:
            raise ValueError(f"duplicate factor {duplicate} out of range")
        images = dataset.images().reshape(len(dataset), -1)
        self._lookup = {row.tobytes(): i for i, row in enumerate(images)}
        self._cards = np.asarray(dataset.space.cardinalities)

    @property
    def z_dim(self) -> int:
        return self.dataset.num_factors + (self.duplicate is not None)

    @property
    def input_shape(self):
        return self.dataset.image_shape

    def factors_of(self, X) -> np.ndarray:
        X = check_images(X, self.dataset.image_shape)
        flat = X.reshape(len(X), -1)
        try:
            idx = np.array([self._lookup[row.tobytes()] for row in flat])
        except KeyError:
            raise ValueError("image is not part of the dataset enumeration") from None
        return self.dataset.space.factors_of(idx)

    def encode(self, X):
        factors = self.factors_of(X)
        mean = self.dataset.space.values_of(factors)
        if self.duplicate is not None:
            mean = np.concatenate([mean, mean[:, [self.duplicate]]], axis=1)
        return mean, np.full_like(mean, POINT_MASS_LOG_VAR)

    def transform(self, X):
        return self.encode(X)[0]

    def _indices(self, values: np.ndarray, cards: np.ndarray) -> np.ndarray:
        # equal-width cells over [0, 1]: maps grid values to themselves and
        # a uniform draw on [0, 1] to a uniform index
        return np.clip(np.floor(values * cards), 0, cards - 1).astype(np.int64)

    def decode(self, z):
        z = check_latents(z, self.z_dim)
        K = self.dataset.num_factors
        factors = self._indices(z[:, :K], self._cards)
        images = self.dataset.render(factors)
        if self.duplicate is not None:
            other = factors.copy()
            other[:, self.duplicate] = self._indices(z[:, K], self._cards[self.duplicate])
            images = np.maximum(images, self.dataset.render(other))
        return images


class NoiseEncoder:
    """Latents are i.i.d. standard normal, independent of the input."""

    def __init__(self, z_dim: int, random_state=0):
        self.z_dim = z_dim
        self._rng = as_rng(random_state)

    def encode(self, X):
        n = len(X)
        mean = self._rng.standard_normal((n, self.z_dim))
        return mean, np.zeros_like(mean)

    def transform(self, X):
        return self.encode(X)[0]


class IdentityAutoencoder:
    """decode(encode(x)) == x exactly: the latent is the flattened image."""

    def __init__(self, image_shape):
        self.image_shape = tuple(image_shape)
        self.z_dim = int(np.prod(self.image_shape))

    def encode(self, X):
        X = check_images(X, self.image_shape)
        mean = X.reshape(len(X), -1).astype(np.float64)
        return mean, np.full_like(mean, -np.inf)

    def decode(self, z):
        z = np.asarray(z, dtype=np.float32)
        return np.clip(z, 0.0, 1.0).reshape((len(z), *self.image_shape))


class ConstantDecoderModel:
    """Encoder ignores its input and the decoder always emits one image."""

    def __init__(self, image: np.ndarray, z_dim: int = 2):
        self.image = np.asarray(image, dtype=np.float32)
        self.z_dim = z_dim

    def encode(self, X):
        n = len(X)
        return np.zeros((n, self.z_dim)), np.zeros((n, self.z_dim))

    def decode(self, z):
        return np.repeat(self.image[None], len(z), axis=0)
