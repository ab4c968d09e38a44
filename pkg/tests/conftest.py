import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pdvi.core import BlockPartition, ObjectiveOracle

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class ShiftedSquares(ObjectiveOracle):
    """``f_i(lam) = scale * ||lam - a_i||^2`` with no local variables."""

    def __init__(self, a, scale=1.0, block_dims=None):
        self.a = np.atleast_2d(np.asarray(a, float))
        if self.a.shape[0] == 1 and np.ndim(a) == 1:
            self.a = self.a.T
        self.scale = scale
        self.n = self.a.shape[0]
        self.d_phi = 0
        self.partition = BlockPartition(tuple(block_dims or (self.a.shape[1],)))

    def value(self, idx, phi, lam):
        idx, phi, lam = self.check_inputs(idx, phi, lam)
        return self.scale * np.sum((lam - self.a[idx]) ** 2, axis=1)

    def grad(self, idx, phi, lam):
        idx, phi, lam = self.check_inputs(idx, phi, lam)
        return np.zeros((idx.size, 0)), 2 * self.scale * (lam - self.a[idx])

    def al_closed_form(self, idx, mu, lam0, penalty):
        idx = np.asarray(idx)
        lam = (2 * self.scale * self.a[idx] - mu + penalty * lam0) / (2 * self.scale + penalty)
        return np.zeros((idx.size, 0)), lam

    def lipschitz_estimates(self, lam=None):
        return np.full(self.partition.n_blocks, 2.0 * self.scale)


@pytest.fixture
def shifted_squares():
    return ShiftedSquares


def central_fd(f, x, h=1e-5):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        g.flat[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


# -- acceptance reporting ----------------------------------------------------------------------

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record ``(number, ok, detail)`` for the acceptance summary and assert ``ok``."""

    def record(number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
