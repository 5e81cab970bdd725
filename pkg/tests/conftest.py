from __future__ import annotations

import numpy as np
import pytest


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def random_spd(rng: np.random.Generator, d: int) -> np.ndarray:
    G = rng.standard_normal((d, d))
    return G @ G.T + 0.1 * np.eye(d)


def loop_permute(M: np.ndarray, p: int, q: int) -> np.ndarray:
    """Index oracle: row i + j*p (0-based) holds the column-stacked block (i, j)."""
    out = np.empty((p * p, q * q))
    for i in range(p):
        for j in range(p):
            for k in range(q):
                for l in range(q):
                    out[i + j * p, k + l * q] = M[i * q + k, j * q + l]
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
