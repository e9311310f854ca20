import numpy as np
import pytest
import torch

from dava_lab.synthdata import build_toysprites


@pytest.fixture(scope="session")
def sprites64():
    ds = build_toysprites()
    ds.images()
    return ds


@pytest.fixture(scope="session")
def sprites32():
    ds = build_toysprites(side=32)
    ds.images()
    return ds


@pytest.fixture(scope="session")
def tiny_sprites():
    """32x32 canvas with a small grid, for training smoke tests."""
    ds = build_toysprites(side=32, n_x=3, n_y=3, n_scales=2, min_scale=0.125, max_scale=0.1875)
    ds.images()
    return ds


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tiny_experiment_dict(**overrides) -> dict:
    """A sweep small enough to train and evaluate every run in about a second."""
    arch = {"total_steps": 4, "batch_size": 8, "z_dim": 3, "diagnostics_every": 2}
    raw = {
        "name": "tiny",
        "profile": "desk",
        "dataset": {"side": 32, "n_x": 3, "n_y": 3, "n_scales": 2, "min_scale": 0.125, "max_scale": 0.1875},
        "architectures": [{"name": "dava", "params": {**arch, "trajectory_every": 1}},
                          {"name": "beta_vae", "params": {**arch, "beta": 1.0}}],
        "seeds": [0, 1, 2],
        "metrics": ["mig", "dci", "fvae"],
        "pipe": {"steps": 3, "set_size": 32, "batch_size": 8, "range_batch": 64},
        "evaluation": {"n_samples": 200, "fvae_votes": 10, "fvae_batch": 8},
    }
    raw.update(overrides)
    return raw


@pytest.fixture
def tiny_experiment():
    return tiny_experiment_dict()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
