import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("lgslab", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lgslab")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_psd(rng, d, kappa=None):
    """Random SPD matrix; with kappa, eigenvalues spread over [1, kappa]."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    if kappa is None:
        lam = rng.uniform(0.1, 3.0, d)
    else:
        lam = 1.0 + (kappa - 1.0) * rng.random(d)
        lam[0], lam[-1] = 1.0, kappa
    return (Q * lam) @ Q.T
