import pytest

from geometry import DetectorArray, SourceGeometry, SourceKind


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run Monte Carlo acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def disc():
    return SourceGeometry(SourceKind.CIRCULAR_DISC, 100e-6)


@pytest.fixture
def wide_disc():
    # First coherence zero about 18 pixels out.
    return SourceGeometry(SourceKind.CIRCULAR_DISC, 1000e-6)


@pytest.fixture
def slit():
    return SourceGeometry(SourceKind.SLIT, 200e-6)


@pytest.fixture
def array():
    return DetectorArray(401)


@pytest.fixture
def small_array():
    return DetectorArray(41)
