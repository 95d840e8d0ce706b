import numpy as np
import pytest
import torch

from subtad.spatial import HexGridIndexer

torch.set_num_threads(1)


@pytest.fixture
def grid():
    return HexGridIndexer(12, 12, 0.001, (0.0, 0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
