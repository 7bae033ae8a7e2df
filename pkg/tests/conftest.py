import sys

import numpy as np
import pytest


def central_difference(fn, arrays, step=1e-5):
    """Central finite-difference gradient of scalar ``fn(*arrays)`` w.r.t. each array.

    Works on plain numpy arrays only, independent of the tensor engine.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + step
            up = fn(*arrays)
            arr[i] = orig - step
            down = fn(*arrays)
            arr[i] = orig
            g[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def mixed_error(analytic, numeric, floor=1e-6):
    """Relative error with an absolute floor for entries near zero."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts, one line per criterion."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for k in sorted(verdicts):
            terminalreporter.write_line(verdicts[k])
