import itertools

import numpy as np
import pytest

from wmscore import SetFunction, make_set_function

# Printed accuracies behind the sentence- and phrase-level tables, as isolation
# scores. Feature 0/1/2 = sentence #1/#2/#3, and NP/PP/VP respectively.
SENTENCE_ISOLATION = {(): 0.0, (0,): 1.000, (1,): 0.987, (2,): 0.571, (0, 1): 1.000, (0, 2): 1.000, (1, 2): 1.000, (0, 1, 2): 1.000}
PHRASE_ISOLATION = {(): 0.0, (0,): 0.605, (1,): 0.855, (2,): 1.000, (0, 1): 0.895, (0, 2): 0.987, (1, 2): 0.987, (0, 1, 2): 0.987}

# row -> (mobius, shapley, sii, tie, arch_attribute) as printed
SENTENCE_PRINTED = {
    (0,): (1.000, 0.407, 0.407, 0.000, 1.000),
    (1,): (0.987, 0.400, 0.400, 0.000, 0.987),
    (2,): (0.571, 0.193, 0.193, 0.000, 0.571),
    (0, 1): (-0.987, 0.000, -0.708, 0.000, 1.000),
    (0, 2): (-0.571, 0.000, -0.292, 0.000, 1.000),
    (1, 2): (-0.558, 0.000, -0.279, 0.000, 1.000),
    (0, 1, 2): (0.558, 0.000, 0.558, 0.000, 1.000),
}
PHRASE_PRINTED = {
    (0,): (0.605, 0.206, 0.206, 0.000, 0.605),
    (1,): (0.855, 0.331, 0.331, 0.000, 0.855),
    (2,): (1.000, 0.450, 0.450, 0.000, 1.000),
    (0, 1): (-0.566, 0.000, -0.276, 0.000, 0.895),
    (0, 2): (-0.618, 0.000, -0.329, 0.000, 0.987),
    (1, 2): (-0.868, 0.000, -0.579, 0.000, 0.987),
    (0, 1, 2): (0.579, 0.000, 0.579, 0.000, 0.987),
}
TABLE_COLUMNS = ("mobius", "shapley", "sii", "tie", "arch_attribute")


def table_isolation(table):
    return make_set_function(3, table)


def random_isolation(rng, d, scale=1.0):
    v = rng.normal(scale=scale, size=1 << d)
    v[0] = 0.0
    return SetFunction(d, v)


def permutation_shapley(values, d):
    """Average marginal contribution over every ordering of the players."""
    phi = [0.0] * d
    count = 0
    for order in itertools.permutations(range(d)):
        mask = 0
        for i in order:
            phi[i] += values[mask | 1 << i] - values[mask]
            mask |= 1 << i
        count += 1
    return [p / count for p in phi]


def assert_rel(actual, expected, rtol=1e-9, atol=1e-12):
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(20231016)


# -- acceptance reporting ----------------------------------------------------

_CRITERIA: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion covered by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    num, title = marker.args
    entry = _CRITERIA.setdefault(num, [title, True, []])
    if call.excinfo is not None:
        entry[1] = False
        entry[2].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA, key=lambda n: int(n)):
        title, ok, failed = _CRITERIA[num]
        line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {title}"
        if failed:
            line += f"  (failing: {', '.join(failed)})"
        terminalreporter.write_line(line)
