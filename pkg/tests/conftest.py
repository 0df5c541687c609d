import os
from pathlib import Path

import numpy as np
import pytest
import torch

from crreid.config import RunConfig
from crreid.data import make_fixture, read_dataset

REPO = Path(__file__).resolve().parents[1]
TOY_CONFIG = REPO / "configs" / "desk_toy.json"
TOY_FIXTURE = REPO / "fixtures" / "toy"

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def fixture_records():
    return make_fixture(num_identities=10, images_per_camera=4, cameras=2, seed=0)


@pytest.fixture(scope="session")
def toy_records():
    return read_dataset(TOY_FIXTURE)


@pytest.fixture(scope="session")
def toy_config():
    return RunConfig.from_file(TOY_CONFIG)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
