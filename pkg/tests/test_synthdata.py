import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dava_lab.synthdata import (
    FactorSpace, FactorSpec, ObservationBatch, ToySpritesConfig, build_dataset, build_toysprites, cache_dir,
    enumerate_distinct, load_dataset, read_manifest, sample_fixed_factor, sample_random, save_dataset,
)


def centroid(img):
    """Intensity-weighted mean pixel coordinate, by explicit summation over pixels."""
    h, w = img.shape[:2]
    total = sx = sy = 0.0
    for r in range(h):
        for c in range(w):
            v = float(img[r, c, 0])
            total += v
            sx += v * (c + 0.5)
            sy += v * (r + 0.5)
    return sx / total, sy / total


def uniform_chi2_pvalue(values, k):
    counts = np.bincount(values, minlength=k)
    return stats.chisquare(counts).pvalue


class TestFactorSpace:
    def test_size_is_product_of_cardinalities(self):
        space = FactorSpace((FactorSpec("a", 2), FactorSpec("b", 3), FactorSpec("c", 5)))
        assert space.size == 30

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            FactorSpace((FactorSpec("a", 2), FactorSpec("a", 3)))

    def test_zero_cardinality_rejected(self):
        with pytest.raises(ValueError):
            FactorSpec("a", 0)

    def test_values_default_to_unit_grid(self):
        assert FactorSpec("a", 3).values == (0.0, 0.5, 1.0)
        assert FactorSpec("a", 1).values == (0.0,)

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=4))
    def test_flat_index_round_trip(self, cards):
        space = FactorSpace(tuple(FactorSpec(f"f{i}", c) for i, c in enumerate(cards)))
        flat = np.arange(space.size)
        assert np.array_equal(space.index_of(space.factors_of(flat)), flat)


class TestToySprites:
    def test_default_size(self, sprites64):
        assert len(sprites64) == 2 * 3 * 8 * 8 * 3 == 1152
        assert sprites64.space.names == ("shape", "scale", "x", "y", "color")
        assert sprites64.image_shape == (64, 64, 1)

    def test_render_is_bit_identical(self, sprites64):
        f = np.array([[1, 2, 3, 4, 1]])
        a = build_toysprites().render(f)
        b = build_toysprites().render(f)
        assert a.tobytes() == b.tobytes()

    def test_pixels_in_unit_interval(self, sprites64):
        imgs = sprites64.images()
        assert imgs.dtype == np.float32
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0

    def test_enumeration_is_distinct(self, sprites64, sprites32):
        assert enumerate_distinct(sprites64) == 1152
        assert enumerate_distinct(sprites32) == 1152

    @pytest.mark.parametrize("side", [32, 64])
    def test_x_step_shifts_centroid_by_stride(self, side):
        ds = build_toysprites(side=side)
        cfg = ds.config
        stride = (side - 2 * cfg["max_scale"] * side) // (cfg["n_x"] - 1)
        for shape, scale, y, color in [(0, 0, 3, 2), (1, 2, 0, 0), (1, 1, 7, 1)]:
            xs = [centroid(ds.render([[shape, scale, x, y, color]])[0])[0] for x in range(cfg["n_x"])]
            assert np.allclose(np.diff(xs), stride, atol=1e-9)

    def test_y_step_shifts_centroid_by_stride(self, sprites32):
        ys = [centroid(sprites32.render([[1, 2, 4, y, 2]])[0])[1] for y in range(8)]
        assert np.allclose(np.diff(ys), np.diff(ys)[0]) and np.diff(ys)[0] >= 1

    def test_mass_invariant_under_translation(self, sprites64):
        for shape, scale, color in itertools.product(range(2), range(3), range(3)):
            f = np.array([[shape, scale, x, y, color] for x in range(8) for y in range(8)])
            imgs = sprites64.render(f)
            lit = (imgs > 0).sum(axis=(1, 2, 3))
            assert np.all(lit == lit[0])
            mass = imgs.astype(np.float64).sum(axis=(1, 2, 3))
            assert np.all(mass == mass[0])

    def test_rejects_zero_cardinality(self):
        with pytest.raises(ValueError, match="cardinality"):
            build_toysprites(n_x=0)

    def test_rejects_sprite_larger_than_canvas(self):
        with pytest.raises(ValueError, match="exceeds"):
            build_toysprites(max_scale=0.6)

    def test_rejects_grid_that_does_not_fit(self):
        with pytest.raises(ValueError):
            build_toysprites(side=16, n_x=20)

    def test_config_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ToySpritesConfig.from_dict({"sides": 32})

    def test_render_rejects_out_of_range_factor(self, sprites32):
        with pytest.raises(ValueError):
            sprites32.render([[2, 0, 0, 0, 0]])


class TestSampling:
    def test_fixed_seed_reproducible(self, sprites32):
        a = sample_random(sprites32, 1, np.random.default_rng(7))
        b = sample_random(sprites32, 1, np.random.default_rng(7))
        assert np.array_equal(a.images, b.images) and np.array_equal(a.factors, b.factors)

    def test_zero_samples_rejected(self, sprites32):
        with pytest.raises(ValueError):
            sample_random(sprites32, 0, np.random.default_rng(0))

    def test_images_match_factors(self, sprites32, rng):
        batch = sample_random(sprites32, 50, rng)
        assert np.array_equal(batch.images, sprites32.render_fn(batch.factors))

    def test_marginals_uniform(self, sprites64):
        batch = sample_random(sprites64, 10_000, np.random.default_rng(11))
        for k, card in enumerate(sprites64.space.cardinalities):
            counts = np.bincount(batch.factors[:, k], minlength=card)
            expected = 10_000 / card
            sigma = np.sqrt(10_000 * (1 / card) * (1 - 1 / card))
            assert np.all(np.abs(counts - expected) <= 3 * sigma)
            assert uniform_chi2_pvalue(batch.factors[:, k], card) > 1e-3

    def test_fixed_factor_contract(self, sprites32, rng):
        batch = sample_fixed_factor(sprites32, 0, 16, rng)
        assert len(batch) == 16
        assert np.all(batch.factors[:, 0] == batch.factors[0, 0])
        assert np.var(batch.factors[:, 0]) == 0

    @pytest.mark.parametrize("k", range(5))
    def test_fixed_factor_other_marginals_uniform(self, sprites64, k):
        batch = sample_fixed_factor(sprites64, k, 10_000, np.random.default_rng(100 + k))
        assert len(np.unique(batch.factors[:, k])) == 1
        for j, card in enumerate(sprites64.space.cardinalities):
            if j == k:
                continue
            counts = np.bincount(batch.factors[:, j], minlength=card)
            sigma = np.sqrt(10_000 * (1 / card) * (1 - 1 / card))
            assert np.all(np.abs(counts - 10_000 / card) <= 3 * sigma)

    def test_fixed_value_is_uniform_over_draws(self, sprites32):
        rng = np.random.default_rng(5)
        values = [sample_fixed_factor(sprites32, 2, 2, rng).factors[0, 2] for _ in range(2000)]
        assert uniform_chi2_pvalue(np.array(values), 8) > 1e-3

    @pytest.mark.parametrize("k", [-1, 5])
    def test_invalid_factor_index(self, sprites32, k):
        with pytest.raises(ValueError):
            sample_fixed_factor(sprites32, k, 4, np.random.default_rng(0))

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            ObservationBatch(np.zeros((0, 4, 4, 1)))
        with pytest.raises(ValueError):
            ObservationBatch(np.zeros((2, 4, 4, 1)), np.zeros((3, 5)))


class TestCache:
    def test_round_trip(self, tmp_path, sprites32):
        out = save_dataset(sprites32, tmp_path / "ds")
        manifest = read_manifest(out / "manifest.txt")
        assert manifest["version"] == "dava-lab-dataset/1"
        assert (manifest["height"], manifest["width"], manifest["channels"]) == ("32", "32", "1")
        assert manifest["factors"] == "shape:2;scale:3;x:8;y:8;color:3"
        raw = np.fromfile(out / "images.f32", dtype="<f4")
        assert raw.size == 1152 * 32 * 32
        loaded = load_dataset(out)
        assert np.array_equal(loaded.images(), sprites32.images())
        assert loaded.config == sprites32.config
        f = np.array([[0, 1, 2, 3, 1]])
        assert np.array_equal(loaded.render(f), sprites32.render(f))

    def test_cache_dir_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("DAVA_LAB_CACHE", str(tmp_path))
        assert cache_dir() == tmp_path

    def test_build_dataset_kind(self):
        with pytest.raises(ValueError):
            build_dataset({"kind": "dsprites"})

    def test_corrupt_block_rejected(self, tmp_path, tiny_sprites):
        out = save_dataset(tiny_sprites, tmp_path / "ds")
        with open(out / "images.f32", "ab") as fh:
            fh.write(b"\0\0\0\0")
        with pytest.raises(ValueError):
            load_dataset(out)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1151))
def test_render_purity_property(flat):
    ds = _default()
    f = ds.space.factors_of(np.array([flat]))
    a, b = ds.render_fn(f), ds.render_fn(f)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1


_CACHE = {}


def _default():
    if "ds" not in _CACHE:
        _CACHE["ds"] = build_toysprites(side=32)
    return _CACHE["ds"]
