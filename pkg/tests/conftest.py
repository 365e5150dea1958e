import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from handslt.data import PRESETS, generate_dataset  # noqa: E402


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    return generate_dataset(PRESETS["tiny"], tmp_path_factory.mktemp("tiny") / "data")


@pytest.fixture(scope="session")
def tiny_data(tiny_root):
    from handslt.training import DataBundle

    return DataBundle.load(tiny_root, require_teacher=True)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
