import math

import numpy as np
import pytest

from bmax import AggregationParams, Dictionary, Observation, SimplexWeights


@pytest.fixture
def tiny():
    """n=2, M=3 instance used across the operation examples."""
    d = Dictionary(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    o = Observation(np.array([0.5, 0.5]))
    p = AggregationParams.flat(3, nu=0.5, omega_sq=1.0)
    return d, o, p


def random_instance(rng, n=None, m=None, flat=False, nu=None, omega_sq=None, scale=None):
    n = int(rng.integers(2, 11)) if n is None else n
    m = int(rng.integers(1, 21)) if m is None else m
    scale = rng.uniform(0.5, 2.0) if scale is None else scale
    F = scale * rng.standard_normal((m, n))
    y = rng.standard_normal(n) * scale
    if flat:
        prior = SimplexWeights.flat(m)
    else:
        w = rng.uniform(0.05, 1.0, m)
        prior = SimplexWeights(w / w.sum())
    nu = rng.uniform(0.1, 0.9) if nu is None else nu
    omega_sq = rng.uniform(0.5, 10.0) if omega_sq is None else omega_sq
    return Dictionary(F), Observation(y), AggregationParams(nu, omega_sq, prior)


def naive_log_j(psi, F, y, prior, nu, omega_sq):
    """Unshifted scalar-loop evaluation of log J; only valid for moderate exponents."""
    total = 0.0
    for f, p in zip(F, prior):
        e = (-sum((a - b) ** 2 for a, b in zip(f, y)) / (2 * omega_sq)
             + (1 - nu) * sum((a - b) ** 2 for a, b in zip(psi, f)) / (2 * omega_sq))
        assert -50 <= e <= 50
        total += p * math.exp(e)
    return math.log(total)


CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
