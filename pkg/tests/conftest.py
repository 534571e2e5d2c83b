import numpy as np
import pytest

from protoadapt import model, prototypes, streams
from protoadapt.cli import ExperimentConfig


def tiny_config(**overrides) -> ExperimentConfig:
    """Small, fast experiment config for plumbing tests."""
    base = dict(
        n_per_class=40,
        n_per_domain=128,
        batch_size=32,
        hidden=(16, 16),
        feature_dim=8,
        pretrain_epochs=2,
        seed=0,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def small_setup():
    """A pretrained small model with source data and prototypes."""
    task = streams.SyntheticTask()
    x, y = streams.make_source_dataset(task, n_per_class=60, seed=11)
    (xt, yt), (xh, yh) = streams.split_by_parity(x, y)
    cfg = model.ModelConfig(input_dim=task.input_dim, hidden=(32, 32), feature_dim=16)
    m0 = model.init_model(cfg, seed=12)
    model.pretrain_source(m0, xt, yt, epochs=12, lr=0.05, seed=13)
    protos = prototypes.build_source_prototypes(m0, xt, yt, seed=14)
    return {
        "task": task,
        "model": m0,
        "protos": protos,
        "train": (xt, yt),
        "held": (xh, yh),
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
