import itertools

import numpy as np
import pytest

from carinf.core import MatchedDesign

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_design(rng, max_sets=8, max_size=3, min_sets=1):
    """Random design over units 0..n-1 with random probabilities; unit 0 of each set treated."""
    K = int(rng.integers(min_sets, max_sets + 1))
    sizes = rng.integers(2, max_size + 1, size=K)
    sets, probs, start = [], [], 0
    for nk in sizes:
        sets.append(np.arange(start, start + nk))
        p = rng.uniform(0.05, 1.0, size=nk)
        probs.append(p / p.sum())
        start += nk
    n = start
    z = np.zeros(n, dtype=int)
    for s in sets:
        z[s[0]] = 1
    y = rng.normal(size=n).round(2)
    return MatchedDesign(tuple(sets), tuple(probs)), y, z


def enumerate_law(design, y):
    """Brute-force list of (statistic, probability) over every assignment."""
    K = design.n_sets
    out = []
    for choice in itertools.product(*(range(len(s)) for s in design.sets)):
        prob = 1.0
        total = 0.0
        for k, i in enumerate(choice):
            s = design.sets[k]
            prob *= design.probs[k][i]
            treated = y[s[i]]
            controls = np.delete(y[s], i)
            total += treated - controls.mean()
        out.append((total / K, prob))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
