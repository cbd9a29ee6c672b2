import numpy as np
import pytest
import torch

from dida.config import RunConfig
from dida.data import DeskConfig, make_desk_benchmark
from dida.models import BundleConfig, ModelBundle
from dida.substrate import seed_everything

# Acceptance lines collected by tests/test_acceptance.py, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seeded():
    seed_everything(0)
    yield


@pytest.fixture(scope="session")
def tiny_desk():
    """A 10-class desk benchmark small enough for unit tests."""
    return make_desk_benchmark(DeskConfig(n_source=120, n_target=120, n_test=60), seed=3)


@pytest.fixture
def bundle():
    return ModelBundle(BundleConfig(), seed=0)


@pytest.fixture
def tiny_run_config(tmp_path):
    cfg = RunConfig()
    cfg.dataset.sizes = [120, 120, 60]
    cfg.da.epochs = 1
    cfg.di.epochs = 1
    cfg.probe.epochs = 2
    cfg.dida_iterations = 2
    cfg.output_dir = str(tmp_path / "runs")
    return cfg


def rng_images(n, shape=(3, 16, 16), seed=0):
    return np.random.default_rng(seed).random((n, *shape), dtype=np.float32)


@pytest.fixture
def images():
    return torch.from_numpy(rng_images(8))
