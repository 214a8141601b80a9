"""Shared fixtures: benchmark configs and lazily trained dynamics models."""

from pathlib import Path

import numpy as np
import pytest

from toast import harness, nn_dynamics

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def pendulum_cfg() -> harness.ExperimentConfig:
    return harness.load_config(CONFIG_DIR / "pendulum.yaml")


@pytest.fixture(scope="session")
def cartpole_cfg() -> harness.ExperimentConfig:
    return harness.load_config(CONFIG_DIR / "cartpole.yaml")


@pytest.fixture(scope="session")
def bicycle_cfg() -> harness.ExperimentConfig:
    return harness.load_config(CONFIG_DIR / "bicycle.yaml")


@pytest.fixture(scope="session")
def pendulum_trained(pendulum_cfg):
    """Benchmark-quality pendulum model plus its training report."""
    spec = harness.build_spec(pendulum_cfg)
    return harness.train_model(pendulum_cfg, spec)


@pytest.fixture(scope="session")
def cartpole_trained(cartpole_cfg):
    spec = harness.build_spec(cartpole_cfg)
    return harness.train_model(cartpole_cfg, spec)


@pytest.fixture(scope="session")
def bicycle_trained(bicycle_cfg):
    spec = harness.build_spec(bicycle_cfg)
    return harness.train_model(bicycle_cfg, spec)


@pytest.fixture(scope="session")
def small_pendulum_model(pendulum_cfg):
    """Cheap but usable pendulum model for planner behavior tests."""
    from dataclasses import replace

    cfg = replace(
        pendulum_cfg,
        model=replace(
            pendulum_cfg.model,
            collect=replace(pendulum_cfg.model.collect, episodes=15, steps=120),
            train=replace(pendulum_cfg.model.train, epochs=60),
        ),
    )
    spec = harness.build_spec(cfg)
    model, _ = harness.train_model(cfg, spec)
    return model


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


def make_random_model(seed: int = 0, **kw) -> nn_dynamics.DynamicsModel:
    defaults = dict(n_x=3, n_u=2, history_len=1, hidden_sizes=(8, 8), angle_idx=(0,))
    defaults.update(kw)
    return nn_dynamics.random_model(rng=np.random.default_rng(seed), **defaults)
