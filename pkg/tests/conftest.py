import numpy as np
import pytest

from snarekit.constraints import Bounds, ConstraintSet, QuadraticMap


def two_disk_set() -> ConstraintSet:
    """Intersection of two radius-3/2 disks centered at (-1,0) and (1,0)."""
    h = np.stack([np.eye(2), np.eye(2)])
    q = np.array([[2.0, 0.0], [-2.0, 0.0]])
    c = np.array([1.0, 1.0])
    return ConstraintSet([QuadraticMap(h, q, c)], Bounds([-np.inf, -np.inf], [9 / 4, 9 / 4]))


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at vector/array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(b), initial=0.0), floor)
    return np.max(np.abs(a - b), initial=0.0) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
