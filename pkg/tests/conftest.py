import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(g, ref):
    """Largest coordinate error relative to the largest reference coordinate."""
    g, ref = np.asarray(g), np.asarray(ref)
    return float(np.abs(g - ref).max() / max(np.abs(ref).max(), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_right_triangle():
    from multilddmm.geom import TriMesh

    return TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def tetrahedron(scale=1.0, offset=(0.0, 0.0, 0.0)):
    """Closed outward-oriented tetrahedron."""
    from multilddmm.geom import TriMesh

    v = scale * np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) + np.asarray(offset)
    f = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]
    return TriMesh(v, f)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
