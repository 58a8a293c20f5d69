import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from densitylab.embed import EmbeddingMatrix  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def random_unit(rng, n, d):
    return EmbeddingMatrix.from_vectors(rng.standard_normal((n, d)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
