import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, scale=1.0):
    a = rng.normal(size=(d, d))
    return scale * (a @ a.T + d * np.eye(d))


def random_gaussian(rng, d, scale=1.0):
    from cotrack.gm import ScaledGaussian

    return ScaledGaussian(
        rng.normal(), rng.normal(size=d, scale=3.0), random_spd(rng, d, scale)
    )
