"""Shared fixtures: tiny deterministic datasets and models for the unit tests.

Everything here is deliberately small; the desk-scale pipeline lives in
test_acceptance.py with its own session fixtures.
"""

import numpy as np
import pytest

from advfoolgen import classifier, data, generator


@pytest.fixture(scope="session")
def tiny_train():
    return data.load_dataset("synthetic10", "train", subset_size=300, seed=11)


@pytest.fixture(scope="session")
def tiny_test():
    return data.load_dataset("synthetic10", "test", subset_size=150, seed=12)


@pytest.fixture(scope="session")
def tiny_model(tiny_train, tiny_test):
    hp = classifier.TrainingConfig(epochs=4, batch_size=64, seed=3)
    return classifier.train_classifier(tiny_train, "smallcnn", hp, eval_set=tiny_test)


@pytest.fixture(scope="session")
def tiny_attack_run(tiny_train, tiny_model, tmp_path_factory):
    """A short generator training run: 4 epochs, checkpoint every epoch."""
    ckpt_dir = tmp_path_factory.mktemp("tiny_attack_ckpts")
    cfg = generator.AttackConfig(
        epochs=4, batch_size=64, latent_dim=32, save_every=1, base_channels=16,
        lr_g=1e-3, lr_d=5e-4, seed=7,
    )
    ckpts = generator.train_advfoolgen(cfg, tiny_train, tiny_model, ckpt_dir)
    return {"checkpoints": ckpts, "dir": ckpt_dir, "config": cfg}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
