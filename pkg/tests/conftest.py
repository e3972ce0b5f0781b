import numpy as np
import pytest
import torch

from cc2d.data import generate_synthetic_dataset


@pytest.fixture(scope="session")
def small_synthetic(tmp_path_factory):
    """A 4-image synthetic set with 3 landmarks and 2 test images."""
    root = tmp_path_factory.mktemp("syn_small")
    return generate_synthetic_dataset(root, seed=3, n_images=4, k=3, n_test=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
