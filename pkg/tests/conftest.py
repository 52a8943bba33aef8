import numpy as np
import pytest

from vgsplat.core import Camera, GaussianSet


def random_gaussians(rng, n, feature_dim=4, depth=3.0):
    return GaussianSet(
        rng.normal(0.0, 0.3, (n, 3)) + [0.0, 0.0, depth],
        rng.normal(-1.8, 0.3, (n, 3)),
        rng.normal(size=(n, 4)),
        rng.normal(size=n),
        rng.normal(0.0, 0.5, (n, feature_dim)),
    )


def random_camera(rng, width=16, height=14, depth=3.0):
    eye = rng.normal(0.0, 0.2, 3)
    return Camera.look_at(eye, [0.0, 0.0, depth], [0.0, -1.0, 0.0], 18.0, 19.0, width, height)


def central_difference(f, x, h):
    """Central differences of scalar ``f`` with respect to every entry of array ``x`` (modified in place)."""
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (criterion, label, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, label, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number} [{label}]: {'PASS' if passed else 'FAIL'}  {detail}")
