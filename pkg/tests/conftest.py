import numpy as np
import pytest

from spectraforge.hypercube import SpectralCube, default_wavelengths


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cube(rng, bands=5, height=6, width=7, wl=None, raw=False):
    data = rng.random((bands, height, width)).astype(np.float32)
    if wl is None:
        wl = np.linspace(450.0, 900.0, bands)
    return SpectralCube(data, wl, raw)


@pytest.fixture
def small_cube(rng):
    return random_cube(rng)


@pytest.fixture
def grid299():
    return default_wavelengths()


def sidon_values(n, unit=0.005, rng=None):
    """n values whose pairwise differences are all distinct multiples of ``unit``.

    Built from the Erdos-Turan set 2pk + (k^2 mod p); shuffled when ``rng``
    is given. Max-based losses on these never sit near a tie.
    """
    p = 2
    while p <= n or any(p % q == 0 for q in range(2, int(p ** 0.5) + 1)):
        p += 1
    k = np.arange(n)
    vals = (2 * p * k + (k * k) % p) * unit
    if rng is not None:
        vals = rng.permutation(vals)
    return vals
