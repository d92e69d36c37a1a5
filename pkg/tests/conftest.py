import logging

import numpy as np
import pytest

from fedptr.diffmodels import Batch, ModelSpec


@pytest.fixture(autouse=True)
def _quiet_partition_warnings():
    logging.getLogger("fedptr").setLevel(logging.ERROR)
    yield


def random_instance(rng, activation="tanh", max_dim=4, max_hidden=2):
    """A small random (spec, params, batch) triple."""
    d = int(rng.integers(1, max_dim + 1))
    c = int(rng.integers(2, 4))
    hidden = tuple(int(h) for h in rng.integers(2, 5, size=int(rng.integers(0, max_hidden + 1))))
    spec = ModelSpec(d, hidden + (c,), activation)
    params = spec.wrap(rng.normal(scale=0.8, size=spec.n_params))
    n = int(rng.integers(1, 6))
    batch = Batch(rng.normal(size=(n, d)), rng.integers(0, c, size=n))
    return spec, params, batch


def central_diff(f, x, eps):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = eps
        out[idx] = (f(x + e) - f(x - e)) / (2 * eps)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


CRITERIA_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> bool:
    """Log one acceptance line; the full list is printed in the terminal summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    CRITERIA_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
