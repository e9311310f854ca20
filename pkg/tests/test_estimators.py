import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dava_lab import DAVA, BetaVAE, LoadedVAE
from dava_lab.estimators import ImageArray


def test_get_set_params_and_clone():
    est = DAVA(z_dim=4, gamma=100.0, total_steps=7)
    params = est.get_params()
    assert params["z_dim"] == 4 and params["gamma"] == 100.0 and params["delta_C"] == 4e-5
    copy = clone(est).set_params(mu_enc=0.5)
    assert copy.get_params()["mu_enc"] == 0.5 and est.mu_enc == 0.3
    assert BetaVAE(beta=4.0).config().beta == 4.0


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        BetaVAE().transform(np.zeros((1, 32, 32, 1), np.float32))


@pytest.mark.parametrize("cls", [DAVA, BetaVAE])
def test_fit_transform_contract(cls, tiny_sprites, tmp_path):
    est = cls(z_dim=3, batch_size=8, total_steps=3, random_state=5).fit(tiny_sprites)
    X = tiny_sprites.sample_random(6, np.random.default_rng(0)).images
    Z = est.transform(X)
    assert Z.shape == (6, 3) and Z.dtype == np.float64
    R = est.inverse_transform(Z)
    assert R.shape == X.shape and R.min() >= 0 and R.max() <= 1
    assert est.n_steps_ == 3
    loaded = LoadedVAE(est.save(tmp_path / "ckpt"))
    np.testing.assert_array_equal(loaded.transform(X), Z)
    np.testing.assert_array_equal(loaded.reconstruct(X), est.reconstruct(X))
    with pytest.raises(AttributeError):
        loaded.save(tmp_path / "again")


def test_fit_accepts_image_array(tiny_sprites):
    images = tiny_sprites.images()[:20]
    est = BetaVAE(z_dim=2, batch_size=4, total_steps=2).fit(images)
    assert est.transform(images).shape == (20, 2)
    src = ImageArray(images)
    assert src.sample_random(3, np.random.default_rng(0)).images.shape == (3, 32, 32, 1)


def test_dava_exposes_capacity(tiny_sprites):
    est = DAVA(z_dim=2, batch_size=8, total_steps=3, delta_C=0.01).fit(tiny_sprites)
    assert est.c_trajectory_[0].tolist() == [0.0, 0.0]
    # capacity moves in whole increments
    assert est.capacity_ in {0.0, 0.01, 0.02, 0.03}


def test_decode_overfits_single_image(tiny_sprites):
    image = tiny_sprites.images()[[17]]
    est = BetaVAE(z_dim=2, beta=0.0, batch_size=8, learning_rate=1e-3, total_steps=600, random_state=0).fit(image)
    assert est.reconstruction_error(image) < 1e-3
