"""Shared fixtures: a small generated dataset and the --run-slow switch."""

from pathlib import Path
import sys

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from datagen import GeneratorConfig, generate_events  # noqa: E402
from dataset_store import write_dataset  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run desk-scale acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale run, needs --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_config():
    return GeneratorConfig(n_events=200, seed=7)


@pytest.fixture(scope="session")
def small_events(small_config):
    return generate_events(small_config)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory, small_config, small_events):
    out = tmp_path_factory.mktemp("events")
    write_dataset(small_events, small_config, str(out))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    from dataset_store import load_dataset
    return load_dataset(str(small_dataset_dir))
