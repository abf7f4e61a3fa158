import numpy as np
import pytest

from lmkrec.store import DescriptorSet, l2_normalize


def random_set(n, d, seed=0, prefix="x", labels=None, normalized=True):
    rng = np.random.default_rng(seed)
    s = DescriptorSet(ids=[f"{prefix}{i:06d}" for i in range(n)],
                      matrix=rng.standard_normal((n, d)), labels=labels)
    return l2_normalize(s) if normalized else s


@pytest.fixture
def make_set():
    return random_set


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
