import numpy as np
import pytest

from curvpriv.dataio import synth_manifold
from curvpriv.training import TrainConfig, Trainer


def tiny_config(seed: int = 1, **overrides) -> TrainConfig:
    base = dict(
        epochs_mu=6,
        epochs_sigma=3,
        epochs_estimator=4,
        epochs_bilevel=1,
        batch_size=64,
        rbf_centers=12,
        critic_cadence=5,
        lr_estimator=3e-3,
        estimator_samples=256,
        geodesic_iters=30,
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def blob_data():
    ds, dec = synth_manifold("two-cluster-blobs", 600, 0.15, seed=0)
    return ds, dec


@pytest.fixture(scope="session")
def trained_toy(blob_data):
    """A small but fully trained pipeline, shared across tests."""
    ds, _ = blob_data
    trainer = Trainer(tiny_config(), ds)
    trainer.run()
    return trainer


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
