import time
from dataclasses import dataclass

import numpy as np
import pytest

from fairdiff.audit import ClassifierModel, train_kappa
from fairdiff.diffusion import EpsilonModel, TrainConfig, train_epsilon
from fairdiff.world import ATTRIBUTE_TOKENS, Dataset, build_world, default_world


@dataclass
class Trained:
    world: Dataset
    model: EpsilonModel
    kappa: ClassifierModel
    losses: list
    seconds: float


@pytest.fixture(scope="session")
def world() -> Dataset:
    return build_world(default_world(), seed=0)


@pytest.fixture(scope="session")
def trained(world) -> Trained:
    """Diffusion model and kappa on the default world, default settings."""
    t0 = time.perf_counter()
    model = EpsilonModel.init(world.dim, world.concepts + list(ATTRIBUTE_TOKENS), seed=0)
    res = train_epsilon(model, world, TrainConfig(seed=0))
    kappa = train_kappa(world, seed=0)
    return Trained(world, res.model, kappa, res.losses, time.perf_counter() - t0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
