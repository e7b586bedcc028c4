import sys
from pathlib import Path

import pytest

# Make `gradsurgery` importable without installing the repo.
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the full-size benchmark and 10^6-sample sweeps")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size acceptance runs (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
