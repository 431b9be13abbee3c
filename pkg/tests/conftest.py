import numpy as np
import pytest

from landprobe import netcore as nc


def central_diff(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at ``x`` by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(spec, n, rng, classes=None):
    classes = classes or spec.output_dim
    x = rng.standard_normal((n,) + spec.input_shape)
    return nc.Batch(x, rng.integers(0, classes, n), classes)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
