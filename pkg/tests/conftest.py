import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("suite")

from cipflow.fem import FeSpace
from cipflow.mesh import generate_polygonal_disc_mesh, generate_unit_square_mesh


@pytest.fixture(scope="session")
def square8():
    return generate_unit_square_mesh(8)


@pytest.fixture(scope="session")
def square16():
    return generate_unit_square_mesh(16)


@pytest.fixture(scope="session")
def disc2():
    return generate_polygonal_disc_mesh(6, 2)


@pytest.fixture(scope="session")
def space8(square8):
    return FeSpace.create(square8)


@pytest.fixture(scope="session")
def space16(square16):
    return FeSpace.create(square16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
