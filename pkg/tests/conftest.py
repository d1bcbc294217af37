import os

os.environ.setdefault("GSOCC_DEBUG", "1")

import numpy as np
import pytest

from gsocc import attention
from gsocc.scene import GaussianSet, SemanticTaxonomy

attention.DEBUG_CHECKS = True


def random_set(rng, N, d=6, F=8, spread=3.0, scale=(0.3, 0.8)):
    """Valid random Gaussian set with unit quaternions."""
    q = rng.normal(size=(N, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet.from_parts(
        rng.uniform(-spread, spread, (N, 3)),
        rng.uniform(*scale, (N, 3)),
        q,
        rng.uniform(0.2, 0.9, N),
        rng.normal(size=(N, d)),
        rng.normal(size=(N, F)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def taxonomy():
    return SemanticTaxonomy.default()


@pytest.fixture
def make_set():
    return random_set


_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail, extra="")`` prints and records one acceptance line."""

    def record(n: int, ok: bool, detail: str, extra: str = "") -> None:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        if extra:
            print(extra)
        _ACCEPTANCE[n] = (line, extra)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        line, extra = _ACCEPTANCE[n]
        terminalreporter.write_line(line)
        for row in extra.splitlines():
            terminalreporter.write_line("    " + row)
