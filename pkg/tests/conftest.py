import numpy as np
import pytest

from maskrl import nn


def numerical_gradients(loss_fn, params: nn.NetworkParams, x: np.ndarray, h: float = 1e-3):
    """Central finite differences of ``loss_fn(params, x)`` w.r.t. every weight and ``x``."""
    grads = []
    for w in params.weights:
        g = {}
        for name, t in w.items():
            gt = np.zeros_like(t)
            it = np.nditer(t, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = t[idx]
                t[idx] = orig + h
                up = loss_fn(params, x)
                t[idx] = orig - h
                down = loss_fn(params, x)
                t[idx] = orig
                gt[idx] = (up - down) / (2 * h)
            g[name] = gt
        grads.append(g)
    gx = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        up = loss_fn(params, x)
        x[idx] = orig - h
        down = loss_fn(params, x)
        x[idx] = orig
        gx[idx] = (up - down) / (2 * h)
    return grads, gx


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criteria_report(request):
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_CRITERIA_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = config.stash.get(_CRITERIA_KEY, None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(report):
        terminalreporter.write_line(report[n])
