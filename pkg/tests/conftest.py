import numpy as np
import pytest

from kglattice import model, operator


@pytest.fixture(scope="session")
def golden():
    return model.golden_frequency(gamma=0.25, tau=1.5)


@pytest.fixture(scope="session")
def zero_potential():
    return model.zero_potential()


@pytest.fixture(scope="session")
def free_512(golden, zero_potential):
    cfg = model.LatticeConfig(n_sites=512)
    H = operator.build_finite_section(zero_potential, golden, cfg)
    return cfg, H, operator.eigendecompose(H)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240814)
