import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from abreg.survey import DesignSpec, FinitePopulation, Sample, draw_sample

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_sample(y, x=None, pi=None, N=None, design=None, domain=None):
    """Sample built directly from arrays (positions stand in for unit indices)."""
    y = np.asarray(y, dtype=float)
    n = y.size
    x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1)
    if pi is None:
        pi = np.full(n, n / N)
    pi = np.asarray(pi, dtype=float)
    N = int(N if N is not None else round(np.sum(1 / pi)))
    if design is None:
        design = DesignSpec.srs(n) if np.allclose(pi, pi[0]) else DesignSpec("pps", n, "independence")
    return Sample(np.arange(n), y, x, pi, design, N, domain)


def linear_population(N=2000, p=5, seed=0, noise=1.0, beta=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(1.0, 1.0, size=(N, p))
    if beta is None:
        beta = np.zeros(p)
        beta[0] = 1.0
        if p > 2:
            beta[2] = -0.5
    y = 0.5 + X @ beta + noise * rng.standard_normal(N)
    return FinitePopulation(y, X)


@pytest.fixture
def srs_sample():
    pop = linear_population()
    return pop, draw_sample(pop, DesignSpec.srs(200), 11)


ACCEPTANCE_LINES = []


def acceptance_line(label, ok, detail=""):
    """Record (and print) one pass/fail line for an acceptance criterion."""
    line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
