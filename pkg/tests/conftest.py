import numpy as np
import pytest

from tissuemix import model
from tissuemix.samplers import RngStream

REFERENCE_K = np.array([0.1, 0.3])
REFERENCE_RHO = 100.0


def reference_lambda() -> np.ndarray:
    return np.linalg.inv(model.REFERENCE_LAMBDA_INV)


def make_dataset(V: int, seed: int = 0, N: int = 3, K=None, rho=REFERENCE_RHO, include_constant=True):
    """Synthetic dataset in the reference three-network regime."""
    K = REFERENCE_K if K is None else np.asarray(K, dtype=float)
    if N == 3:
        lam = reference_lambda()
    else:
        lam = np.linalg.inv(0.01 * np.eye(N - 1))
        K = np.full(N - 1, 0.2) if len(K) != N - 1 else K
    truth = model.ModelParams(K=K, Lam=lam, rho=rho)
    rng = RngStream(seed)
    profiles = model.random_profiles(rng, V, N, include_constant=include_constant)
    return model.synth_generate(rng, truth, profiles), truth


class ZeroStream:
    """Test double: a stream whose normals are all zero."""

    def __init__(self):
        self.seed = 0
        self.stream_id = 0

    def normals(self, n):
        return np.zeros(n)

    def uniforms(self, n):
        return np.full(n, 0.5)


@pytest.fixture
def small_dataset():
    ds, truth = make_dataset(200, seed=11)
    return ds
