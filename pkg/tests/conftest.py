import numpy as np
import pytest

from supernas.search_space import micro_space, toy_space
from supernas.supernet import NetShape, init_maximal


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_shape():
    return NetShape(space=toy_space(), d_model=(8, 8, 8, 8), image_size=8, patch=2, token_dim=8, query_dim=4)


@pytest.fixture(scope="session")
def micro_shape():
    return NetShape(space=micro_space(), d_model=(16, 16))


@pytest.fixture
def toy_params(toy_shape):
    return init_maximal(toy_shape, np.random.default_rng(0))


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance():
    def record(num: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {num:2d}: {title} ({detail})"
        ACCEPTANCE[num] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
