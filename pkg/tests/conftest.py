import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tilecodec.bitstream import load_toy_model  # noqa: E402
from tilecodec.model import CodecModel  # noqa: E402

from helpers import TINY_ARCH  # noqa: E402


@pytest.fixture(scope="session")
def tiny_model():
    return CodecModel.initialize(TINY_ARCH, seed=5)


@pytest.fixture(scope="session")
def toy_model():
    """The pretrained checkpoint shipped inside the package."""
    return load_toy_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


#: (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


@pytest.fixture
def report():
    def record(criterion: int, passed: bool, detail: str) -> None:
        line = f"[ACCEPTANCE {criterion}] {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append((criterion, passed, line))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(line)
