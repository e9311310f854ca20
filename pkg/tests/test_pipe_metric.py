import math

import numpy as np
import pytest
from scipy import stats

from dava_lab import pipe_metric
from dava_lab.oracles import ConstantDecoderModel, FactorOracle, IdentityAutoencoder
from dava_lab.pipe_metric import (
    PipeConfig, SampleSets, build_sample_sets, pipe, pipe_from_sets, pipe_rec, pipe_score, sample_ep,
    sample_fp_permute, sample_fp_uniform, split_sets,
)
from dava_lab.synthdata import ObservationBatch


@pytest.fixture(scope="module")
def oracle(sprites32):
    return FactorOracle(sprites32)


class TestScore:
    @pytest.mark.parametrize("acc,score", [(0.5, 1.0), (1.0, 0.0), (0.0, 2.0)])
    def test_exact(self, acc, score):
        assert pipe_score(acc) == score

    def test_not_clamped(self):
        assert math.isclose(pipe_score(0.45), 1.1, abs_tol=1e-12)

    def test_grid(self):
        for i in range(1001):
            acc = i / 1000
            assert pipe_score(acc) == 2.0 * (1.0 - acc)


class TestSamplers:
    def test_ep_contract(self, oracle, sprites32):
        out = sample_ep(oracle, sprites32, 4, np.random.default_rng(0))
        assert out.images.shape == (4, 32, 32, 1)
        assert out.images.min() >= 0 and out.images.max() <= 1

    def test_ep_identity_model_returns_inputs(self, sprites32):
        model = IdentityAutoencoder(sprites32.image_shape)
        out = sample_ep(model, sprites32, 32, np.random.default_rng(3))
        batch = sprites32.sample_random(32, np.random.default_rng(3))
        assert np.array_equal(out.images, batch.images)

    def test_ep_reproducible(self, oracle, sprites32):
        a = sample_ep(oracle, sprites32, 16, 5)
        b = sample_ep(oracle, sprites32, 16, 5)
        assert np.array_equal(a.images, b.images)

    def test_ep_uses_sampled_latents(self, sprites32):
        class Wide:
            z_dim = 1

            def encode(self, X):
                return np.zeros((len(X), 1)), np.zeros((len(X), 1))

            def decode(self, z):
                return np.repeat(np.clip(z, 0, 1)[:, :, None, None], 32, 1).repeat(32, 2)[..., :1]

        _, z = sample_ep(Wide(), sprites32, 2000, 0, return_latents=True)
        assert abs(z.std() - 1.0) < 0.05

    def test_permute_rejects_single_sample(self, oracle, sprites32):
        with pytest.raises(ValueError):
            sample_fp_permute(oracle, sprites32, 1, 0)

    def test_permute_preserves_latent_multisets(self, oracle, sprites32):
        _, z_ep = sample_ep(oracle, sprites32, 300, 9, return_latents=True)
        out, z_fp = sample_fp_permute(oracle, sprites32, 300, 9, return_latents=True)
        assert np.array_equal(np.sort(z_fp, axis=0), np.sort(z_ep, axis=0))
        assert np.array_equal(z_fp.mean(axis=0), z_ep.mean(axis=0)) or np.allclose(z_fp.mean(0), z_ep.mean(0), 0, 1e-15)
        assert not np.array_equal(z_fp, z_ep)
        assert out.images.shape == (300, 32, 32, 1)

    def test_uniform_inside_ranges_and_uniform(self, oracle, sprites32):
        rng = np.random.default_rng(4)
        lo, hi = pipe_metric.estimate_latent_ranges(oracle, sprites32, rng)
        _, z = sample_fp_uniform(oracle, sprites32, 10_000, rng, ranges=(lo, hi), return_latents=True)
        assert np.all(z >= lo) and np.all(z <= hi)
        for j in range(z.shape[1]):
            assert stats.kstest((z[:, j] - lo[j]) / (hi[j] - lo[j]), "uniform").pvalue > 1e-3

    def test_uniform_range_from_sampled_latents(self, oracle, sprites32):
        lo, hi = pipe_metric.estimate_latent_ranges(oracle, sprites32, 0, n=2048)
        assert np.allclose(lo, 0.0, atol=1e-12) and np.allclose(hi, 1.0, atol=1e-12)

    def test_collapsed_dimension_held_constant(self, sprites32):
        class Collapsed(FactorOracle):
            def encode(self, X):
                mean, log_var = super().encode(X)
                mean[:, 1] = 0.25
                return mean, log_var

        model = Collapsed(sprites32)
        model.decode = lambda z: np.zeros((len(z), 32, 32, 1), np.float32)
        _, z = sample_fp_uniform(model, sprites32, 500, 0, return_latents=True)
        # sampling noise of the encoder keeps the estimated range at ulp scale
        assert np.all(np.abs(z[:, 1] - 0.25) < 1e-12)
        assert np.unique(z[:, 0]).size == 500
        lo, hi = np.array([0.0, 0.25]), np.array([1.0, 0.25])
        _, z = sample_fp_uniform(model, sprites32, 500, 0, ranges=(lo, hi), return_latents=True)
        assert np.unique(z[:, 1]).tolist() == [0.25]

    @pytest.mark.parametrize("sampler", ["uniform", "permute"])
    def test_any_model_gives_valid_images(self, sprites32, sampler):
        model = ConstantDecoderModel(np.full((32, 32, 1), 0.3), z_dim=3)
        sets = build_sample_sets(model, sprites32, 8, 0, sampler)
        for batch in (sets.s_ep, sets.s_fp):
            assert batch.images.shape == (8, 32, 32, 1)
            assert batch.images.min() >= 0 and batch.images.max() <= 1

    def test_shape_mismatch(self, sprites64, oracle):
        with pytest.raises(ValueError):
            sample_ep(oracle, sprites64, 4, 0)

    def test_unknown_sampler(self, oracle, sprites32):
        with pytest.raises(ValueError):
            build_sample_sets(oracle, sprites32, 4, 0, "gaussian")


class TestProcedure:
    def test_split_balanced(self):
        train, test = split_sets(100, 0.9, np.random.default_rng(0))
        assert len(train) == 90 and len(test) == 10
        assert not set(train) & set(test) and set(train) | set(test) == set(range(100))

    def test_pipe_result_contract_and_determinism(self, oracle, sprites32):
        cfg = PipeConfig(set_size=256, steps=20, batch_size=32)
        a = pipe(oracle, sprites32, cfg, seed=3)
        b = pipe(oracle, sprites32, cfg, seed=3)
        assert a == b
        assert a.score == 2.0 * (1.0 - a.test_accuracy)
        assert 0 <= a.test_accuracy <= 1
        # train and test splits hold equal counts of both classes
        assert (a.n_train, a.n_test) == (2 * 230, 2 * 26) and a.sampler == "uniform" and a.seed == 3

    def test_separable_sets_score_zero(self):
        rng = np.random.default_rng(0)
        ep = ObservationBatch(np.ones((200, 32, 32, 1), np.float32) * rng.uniform(0.8, 1, (200, 1, 1, 1)).astype(np.float32))
        fp = ObservationBatch(np.zeros((200, 32, 32, 1), np.float32) + rng.uniform(0, 0.2, (200, 1, 1, 1)).astype(np.float32))
        result = pipe_from_sets(SampleSets(ep, fp, "test"), PipeConfig(set_size=200, steps=150, batch_size=32,
                                                                     learning_rate=1e-3), seed=0)
        assert result.test_accuracy == 1.0 and result.score == 0.0

    def test_identical_sets_score_near_one(self):
        images = np.random.default_rng(0).random((200, 32, 32, 1)).astype(np.float32)
        result = pipe_from_sets(SampleSets(ObservationBatch(images), ObservationBatch(images.copy()), "test"),
                                PipeConfig(set_size=200, steps=50, batch_size=32), seed=0)
        # identical pairs in the test split: the discriminator cannot separate them
        assert result.test_accuracy == 0.5 and result.score == 1.0

    def test_config_validation(self):
        for kw in (dict(train_fraction=1.0), dict(steps=0), dict(fp_sampler="x")):
            with pytest.raises(ValueError):
                PipeConfig(**kw)
        with pytest.raises(ValueError):
            PipeConfig.from_dict({"step": 3})


class TestPipeRec:
    def test_examples(self):
        pop = [0.01, 0.02, 0.05]
        assert pipe_rec(0.8, 0.02, pop, 0.0) == 0.8
        assert pipe_rec(0.8, 0.01, pop, 1.0) == 0.8
        assert math.isclose(pipe_rec(0.8, 0.05, pop, 1.0), 0.8 - 1.0, abs_tol=1e-15)
        assert math.isclose(pipe_rec(0.8, 0.03, pop, 0.5), 0.8 - 0.5 * 0.5, abs_tol=1e-12)

    def test_degenerate_population(self):
        assert pipe_rec(0.7, 0.1, [0.1, 0.1], 1.0) == 0.7

    def test_errors(self):
        with pytest.raises(ValueError):
            pipe_rec(0.5, 0.1, [], 1.0)
        with pytest.raises(ValueError):
            pipe_rec(0.5, 0.1, [0.1], -1.0)


class TestCollapse:
    def test_constant_decoder_collapsed(self):
        assert pipe_metric.is_collapsed(ConstantDecoderModel(np.full((32, 32, 1), 0.5)))

    def test_oracle_not_collapsed(self, oracle):
        assert not pipe_metric.is_collapsed(oracle)
