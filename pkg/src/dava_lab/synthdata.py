"""Procedural ground-truth-factor image datasets.

A dataset is a ``FactorSpace`` plus a deterministic renderer mapping one
factor-index tuple to one image.  The only renderer shipped is
``toysprites``: a gray sprite (square or ellipse) at a grid position, scale
and intensity on a black canvas.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DATASET_FORMAT_VERSION = "dava-lab-dataset/1"
IMAGES_FILENAME = "images.f32"
MANIFEST_FILENAME = "manifest.txt"


@dataclass(frozen=True)
class FactorSpec:
    name: str
    cardinality: int
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.cardinality < 1:
            raise ValueError(f"factor {self.name!r}: cardinality must be >= 1, got {self.cardinality}")
        if not self.values:
            object.__setattr__(self, "values", _unit_grid(self.cardinality))
        if len(self.values) != self.cardinality:
            raise ValueError(f"factor {self.name!r}: {len(self.values)} values for cardinality {self.cardinality}")
        if np.any(np.diff(self.values) <= 0):
            raise ValueError(f"factor {self.name!r}: values must be strictly increasing")


def _unit_grid(n: int) -> tuple[float, ...]:
    if n == 1:
        return (0.0,)
    return tuple(float(v) for v in np.linspace(0.0, 1.0, n))


@dataclass(frozen=True)
class FactorSpace:
    factors: tuple[FactorSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise ValueError("a factor space needs at least one factor")
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ValueError(f"factor names must be unique: {names}")

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.cardinality for f in self.factors)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    @property
    def size(self) -> int:
        return int(np.prod(self.cardinalities))

    def index_of(self, factors: np.ndarray) -> np.ndarray:
        """Flat enumeration index of each row of factor indices."""
        factors = np.asarray(factors, dtype=np.int64)
        return np.ravel_multi_index(tuple(factors.T), self.cardinalities)

    def factors_of(self, flat: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        return np.stack(np.unravel_index(flat, self.cardinalities), axis=-1)

    def values_of(self, factors: np.ndarray) -> np.ndarray:
        """Normalized factor values for an (n, K) array of factor indices."""
        factors = np.asarray(factors, dtype=np.int64)
        cols = [np.asarray(f.values)[factors[:, k]] for k, f in enumerate(self.factors)]
        return np.stack(cols, axis=1)

    def validate(self, factors: np.ndarray) -> None:
        factors = np.asarray(factors)
        if factors.ndim != 2 or factors.shape[1] != self.num_factors:
            raise ValueError(f"expected factors of shape (n, {self.num_factors}), got {factors.shape}")
        if np.any(factors < 0) or np.any(factors >= np.asarray(self.cardinalities)):
            raise ValueError("factor index out of range")


@dataclass
class ObservationBatch:
    images: np.ndarray
    factors: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError(f"images must have shape (n, H, W, C) with n >= 1, got {self.images.shape}")
        if self.factors is not None and len(self.factors) != len(self.images):
            raise ValueError("images and factors disagree on batch size")

    def __len__(self):
        return len(self.images)


@dataclass
class GroundTruthDataset:
    """Factor space plus a pure renderer.

    ``render_fn`` maps an (n, K) array of factor indices to an (n, H, W, C)
    float32 array.  The full enumeration is rendered once on first use and
    kept; sampling is then an index lookup.
    """

    space: FactorSpace
    render_fn: Callable[[np.ndarray], np.ndarray]
    image_shape: tuple[int, int, int]
    name: str = "dataset"
    config: dict = field(default_factory=dict)
    _images: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_factors(self) -> int:
        return self.space.num_factors

    def __len__(self):
        return self.space.size

    def render(self, factors: np.ndarray) -> np.ndarray:
        factors = np.atleast_2d(np.asarray(factors, dtype=np.int64))
        self.space.validate(factors)
        if self._images is not None:
            return self._images[self.space.index_of(factors)]
        return self.render_fn(factors)

    def all_factors(self) -> np.ndarray:
        return self.space.factors_of(np.arange(self.space.size))

    def images(self) -> np.ndarray:
        """Every configuration's image, in flat enumeration order."""
        if self._images is None:
            self._images = np.ascontiguousarray(self.render_fn(self.all_factors()), dtype=np.float32)
        return self._images

    def sample_factors(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        cols = [rng.integers(0, c, size=n) for c in self.space.cardinalities]
        return np.stack(cols, axis=1).astype(np.int64)

    def sample_random(self, n: int, rng: np.random.Generator) -> ObservationBatch:
        factors = self.sample_factors(n, rng)
        return ObservationBatch(self.images()[self.space.index_of(factors)], factors)

    def sample_fixed_factor(self, factor_index: int, n: int, rng: np.random.Generator) -> ObservationBatch:
        if not 0 <= factor_index < self.num_factors:
            raise ValueError(f"factor index {factor_index} out of range [0, {self.num_factors})")
        factors = self.sample_factors(n, rng)
        factors[:, factor_index] = rng.integers(0, self.space.cardinalities[factor_index])
        return ObservationBatch(self.images()[self.space.index_of(factors)], factors)


def sample_random(dataset: GroundTruthDataset, n: int, rng: np.random.Generator) -> ObservationBatch:
    return dataset.sample_random(n, rng)


def sample_fixed_factor(dataset: GroundTruthDataset, factor_index: int, n: int,
                        rng: np.random.Generator) -> ObservationBatch:
    return dataset.sample_fixed_factor(factor_index, n, rng)


# --------------------------------------------------------------------------
# toysprites

@dataclass(frozen=True)
class ToySpritesConfig:
    side: int = 64
    n_shapes: int = 2
    n_scales: int = 3
    n_x: int = 8
    n_y: int = 8
    n_colors: int = 3
    # sprite half-extent as a fraction of the canvas side, smallest to largest
    min_scale: float = 0.0625
    max_scale: float = 0.125
    min_intensity: float = 0.4
    max_intensity: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "ToySpritesConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known - {"kind"}
        if unknown:
            raise ValueError(f"unknown toysprites option(s): {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return {"kind": "toysprites", **dataclasses.asdict(self)}


SHAPES = ("square", "ellipse")
# ellipse vertical semi-axis relative to the horizontal one
ELLIPSE_ASPECT = 0.6


def _grid_centers(side: int, n: int, half_extent: float) -> np.ndarray:
    if n == 1:
        return np.array([side / 2.0])
    stride = int((side - 2 * half_extent) // (n - 1))
    if stride < 1:
        raise ValueError(f"{n} positions of a sprite with half-extent {half_extent} px do not fit a {side} px canvas")
    span = stride * (n - 1)
    offset = (side - span) / 2.0
    return offset + stride * np.arange(n, dtype=np.float64)


def build_toysprites(config: ToySpritesConfig | dict | None = None, **overrides) -> GroundTruthDataset:
    """Build the toysprites dataset.

    Factors, in order: shape, scale, x-position, y-position, color.  A pixel
    is lit when its center lies inside the sprite, so moving the sprite by
    one grid step translates the lit set by an integer pixel stride.
    """
    if config is None:
        config = ToySpritesConfig(**overrides)
    elif isinstance(config, dict):
        config = ToySpritesConfig.from_dict({**config, **overrides})
    elif overrides:
        config = dataclasses.replace(config, **overrides)

    cards = dict(shape=config.n_shapes, scale=config.n_scales, x=config.n_x, y=config.n_y, color=config.n_colors)
    for name, c in cards.items():
        if c < 1:
            raise ValueError(f"factor {name!r}: cardinality must be >= 1, got {c}")
    if config.n_shapes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} shapes are available")
    if config.side < 1:
        raise ValueError("canvas side must be positive")

    side = config.side
    if config.n_scales == 1:
        half = np.array([config.max_scale * side])
    else:
        half = np.linspace(config.min_scale, config.max_scale, config.n_scales) * side
    if half.min() <= 0 or 2 * half.max() > side:
        raise ValueError(f"sprite extent {2 * half.max():.1f} px exceeds the {side} px canvas")
    xs = _grid_centers(side, config.n_x, half.max())
    ys = _grid_centers(side, config.n_y, half.max())
    if config.n_colors == 1:
        intensities = np.array([config.max_intensity])
    else:
        intensities = np.linspace(config.min_intensity, config.max_intensity, config.n_colors)

    space = FactorSpace(tuple(FactorSpec(name, card) for name, card in cards.items()))
    pix = np.arange(side, dtype=np.float64) + 0.5

    def render(factors: np.ndarray) -> np.ndarray:
        factors = np.asarray(factors, dtype=np.int64)
        h = half[factors[:, 1]][:, None, None]
        dx = np.abs(pix[None, None, :] - xs[factors[:, 2]][:, None, None])
        dy = np.abs(pix[None, :, None] - ys[factors[:, 3]][:, None, None])
        square = (dx <= h) & (dy <= h)
        ellipse = (dx / h) ** 2 + (dy / (ELLIPSE_ASPECT * h)) ** 2 <= 1.0
        mask = np.where((factors[:, 0] == 0)[:, None, None], square, ellipse)
        img = mask * intensities[factors[:, 4]][:, None, None]
        return img[..., None].astype(np.float32)

    return GroundTruthDataset(space, render, (side, side, 1), name=f"toysprites{side}", config=config.to_dict())


def build_dataset(config: dict) -> GroundTruthDataset:
    kind = config.get("kind", "toysprites")
    if kind != "toysprites":
        raise ValueError(f"unknown dataset kind {kind!r}")
    return build_toysprites(config)


# --------------------------------------------------------------------------
# on-disk cache

def cache_dir() -> Path:
    return Path(os.environ.get("DAVA_LAB_CACHE", Path.home() / ".cache" / "dava_lab"))


def save_dataset(dataset: GroundTruthDataset, out: str | os.PathLike) -> Path:
    """Write the rendered enumeration as raw little-endian float32 plus a manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    images = dataset.images()
    images.astype("<f4").tofile(out / IMAGES_FILENAME)
    h, w, c = dataset.image_shape
    factors = ";".join(f"{f.name}:{f.cardinality}" for f in dataset.space.factors)
    lines = [
        f"version={DATASET_FORMAT_VERSION}",
        f"name={dataset.name}",
        f"height={h}",
        f"width={w}",
        f"channels={c}",
        f"factors={factors}",
    ]
    if dataset.config:
        lines.append("config=" + ";".join(f"{k}:{v}" for k, v in dataset.config.items()))
    (out / MANIFEST_FILENAME).write_text("\n".join(lines) + "\n")
    return out


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed manifest line: {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def _parse_config_field(raw: str) -> dict:
    cfg = {}
    for item in raw.split(";"):
        k, _, v = item.partition(":")
        if k == "kind":
            cfg[k] = v
        else:
            cfg[k] = float(v) if "." in v else int(v)
    return cfg


def load_dataset(path: str | os.PathLike) -> GroundTruthDataset:
    """Load a cached dataset directory written by ``save_dataset``."""
    path = Path(path)
    manifest = read_manifest(path / MANIFEST_FILENAME)
    if manifest.get("version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')!r}")
    shape = (int(manifest["height"]), int(manifest["width"]), int(manifest["channels"]))
    specs = []
    for item in manifest["factors"].split(";"):
        name, _, card = item.partition(":")
        specs.append(FactorSpec(name, int(card)))
    space = FactorSpace(tuple(specs))
    images = np.fromfile(path / IMAGES_FILENAME, dtype="<f4")
    if images.size != space.size * int(np.prod(shape)):
        raise ValueError("image block size does not match the manifest")
    images = images.reshape((space.size, *shape)).astype(np.float32)
    config = _parse_config_field(manifest["config"]) if "config" in manifest else {}

    if config:
        render_fn = build_dataset(config).render_fn
    else:
        def render_fn(factors, _images=images, _space=space):
            return _images[_space.index_of(factors)]

    return GroundTruthDataset(space, render_fn, shape, name=manifest.get("name", path.name),
                              config=config, _images=images)


def enumerate_distinct(dataset: GroundTruthDataset) -> int:
    """Number of distinct images in the full enumeration."""
    images = dataset.images().reshape(len(dataset), -1)
    return len({row.tobytes() for row in images})


def factor_values(dataset: GroundTruthDataset, factors: Sequence[Sequence[int]]) -> np.ndarray:
    return dataset.space.values_of(np.asarray(factors))
