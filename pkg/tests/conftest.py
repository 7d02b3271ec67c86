import numpy as np
import pytest

from bcif.geometry import build_family
from bcif.grid import make_grid


@pytest.fixture(scope="session")
def family():
    return build_family()


@pytest.fixture(scope="session")
def grid16():
    return make_grid(16)


@pytest.fixture(scope="session")
def grid32():
    return make_grid(32)


def random_bandlimited(grid, kband=6, ncomp=None, seed=0):
    """A random real field band-limited to |k| <= kband per axis."""
    rng = np.random.default_rng(seed)
    n = grid.n
    shape = (n, n, n) if ncomp is None else (ncomp, n, n, n)
    raw = rng.standard_normal(shape)
    spec = grid.fwd(raw)
    mask = (
        (np.abs(grid.k1) <= kband)
        & (np.abs(grid.k2) <= kband)
        & (np.abs(grid.k3) <= kband)
    )
    spec *= mask
    out = grid.inv(spec)
    return out / max(np.abs(out).max(), 1e-300)
