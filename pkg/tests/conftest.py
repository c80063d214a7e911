import numpy as np
import pytest

from gsrw.head import HeadParams
from gsrw.synthio import EmbeddingRecord


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(rng, d, K):
    params = HeadParams.initialize(d, K, random_state=rng)
    params.norm_scale[:] = rng.uniform(0.5, 1.5, d)
    params.norm_shift[:] = rng.normal(0, 0.3, d)
    params.group_biases[:] = rng.normal(0, 0.5, K)
    return params


def distance_params(d, K, weight=-1.0, bias=4.0):
    """Head whose affinity decreases monotonically with squared distance."""
    m = d // K
    return HeadParams(np.ones(d), np.zeros(d), np.full((K, m), weight), np.full(K, bias))


def records_from(X, labels, cams=None):
    cams = [None] * len(labels) if cams is None else cams
    return [EmbeddingRecord(str(l), x, c) for x, l, c in zip(X, labels, cams)]


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
