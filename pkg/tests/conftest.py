import numpy as np
import pytest

from cfeval import sim
from cfeval._rng import stream


def make_instance(seed=0, **overrides):
    params = dict(n=2000, inventory_size=50, candidates_per_request=10, seed=seed)
    params.update(overrides)
    cfg = sim.SimConfig(**params)
    truth = sim.make_ground_truth(cfg, stream(seed, "truth"))
    source, targets = sim.make_policies(cfg, truth, stream(seed, "policies"))
    bundle = sim.simulate(cfg, truth, source, targets)
    return cfg, truth, source, targets, bundle


@pytest.fixture(scope="session")
def small():
    return make_instance(0)


@pytest.fixture(scope="session")
def default_instance():
    """The default simulation config (n=50k), seed 0."""
    return make_instance(0, n=50_000, inventory_size=200, candidates_per_request=20)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
