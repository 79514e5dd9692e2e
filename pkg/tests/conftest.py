import numpy as np
import pytest

from trajden.dataset import generate_dataset
from trajden.worldgen import GpsNoiseSpec


def pytest_addoption(parser):
    parser.addoption("--skip-slow", action="store_true", help="skip the end-to-end training checks")


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skip-slow"):
        return
    skip = pytest.mark.skip(reason="--skip-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six scenarios on disk (four train, two eval), shared by the slower tests."""
    out = tmp_path_factory.mktemp("data") / "six"
    scns, manifest = generate_dataset(6, GpsNoiseSpec(seed=5), seed=5, out_dir=out, eval_fraction=1 / 3)
    return out, scns, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
