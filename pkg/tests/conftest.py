import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "fraclab",
    deadline=None,
    derandomize=True,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("fraclab")


def band_limited(grid, rng, kmax=6, mean_zero=False):
    """Random real field built from modes with |k| <= kmax on every axis."""
    from fraclab.spectral import Field

    coef = np.zeros(grid.shape, dtype=complex)
    idx = np.arange(-kmax, kmax + 1) % grid.N
    sl = np.ix_(*([idx] * grid.n))
    coef[sl] = rng.normal(size=(len(idx),) * grid.n) + 1j * rng.normal(size=(len(idx),) * grid.n)
    vals = np.real(np.fft.ifftn(coef)) * grid.size
    if mean_zero:
        vals -= vals.mean()
    return Field(grid, vals)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
