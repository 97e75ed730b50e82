import numpy as np
import pytest

from blobtrack.blob_model import BlobState


def sample_blob_positions(rng, state: BlobState, n: int):
    """Draw n (x, y, sigma) samples from the blob event distribution."""
    sigma = rng.integers(0, 2, size=n) * 2 - 1
    c, s = np.cos(state.theta), np.sin(state.theta)
    rot = np.array([[c, -s], [s, c]])
    normals = rng.standard_normal((n, 2)) * state.lam
    pos = state.p + sigma[:, None] * state.delta + normals @ rot.T
    return pos[:, 0], pos[:, 1], sigma


@pytest.fixture
def rng():
    return np.random.default_rng(42)
