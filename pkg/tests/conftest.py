import pytest

from cache import structure_cache


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long statistical checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def fresh_structure_cache():
    structure_cache.clear()
    yield
    structure_cache.clear()
