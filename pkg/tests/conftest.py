import pytest

from crtsim.census import DEFAULT_PROFILES, generate_synthetic_census
from crtsim.randomization import build_pool


@pytest.fixture(scope="session")
def census():
    return generate_synthetic_census(DEFAULT_PROFILES, seed=3)


@pytest.fixture(scope="session")
def pool60(census):
    return build_pool(census, n_per_arm=60, n_attempts=4000, seed=11)
