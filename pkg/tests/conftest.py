from contextlib import contextmanager

import hypothesis
import numpy as np
import pytest

from ntklab.model import NetworkSpec, init_params
from ntklab.numerics import make_rng

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute experiment-style checks")


ACCEPTANCE: dict = {}


class _Outcome:
    detail = ""


@pytest.fixture
def criterion():
    """``with criterion(n, title) as out:`` records pass/fail for the summary."""

    @contextmanager
    def record(key, title):
        out = _Outcome()
        try:
            yield out
        except BaseException:
            ACCEPTANCE[key] = (False, title, out.detail)
            raise
        ACCEPTANCE[key] = (True, title, out.detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (isinstance(k, str), str(k).zfill(3))):
        ok, title, detail = ACCEPTANCE[key]
        label = f"criterion {key}" if isinstance(key, int) else key
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'} {title}" + (f" ({detail})" if detail else ""))


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_net():
    spec = NetworkSpec(6, (9, 7), 3, sigma_w=1.4, sigma_b=0.3)
    return init_params(spec, make_rng(5))


@pytest.fixture
def conv_net():
    spec = NetworkSpec(2 * 5 * 5, (8,), 3, 1.2, 0.2, ((3, 2, 3, 3, 5, 5), (4, 3, 2, 2, 3, 3)))
    return init_params(spec, make_rng(6))


def fd_jacobian(fn, theta, h=1e-4):
    """Central differences of a vector function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    base = np.asarray(fn(theta)).ravel()
    out = np.zeros((base.size, theta.size))
    for j in range(theta.size):
        t = theta.copy()
        t[j] += h
        up = np.asarray(fn(t)).ravel()
        t[j] -= 2 * h
        down = np.asarray(fn(t)).ravel()
        out[:, j] = (up - down) / (2 * h)
    return out


def rel_close(a, b, rtol, atol_floor=1e-8):
    """Entrywise |a-b| <= rtol * max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), atol_floor)
    return bool(np.all(np.abs(a - b) <= rtol * scale))
