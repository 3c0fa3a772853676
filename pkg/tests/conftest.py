import numpy as np
import pytest

from xmoda.phantom import PhantomParams, generate_case
from xmoda.volume_io import Volume, normalize_intensity

# small geometry that still fits every structure: 16 x 24 x 24 mm
TINY = PhantomParams(volume_shape=(8, 24, 24), spacing=(2.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def tiny_cases():
    """Normalised (S, T, mask) triples for six tiny phantom cases."""
    out = []
    for i in range(6):
        s, t, m = generate_case(TINY, i)
        out.append((normalize_intensity(s), normalize_intensity(t), m))
    return out


def random_volume(seed, shape=(4, 8, 8)):
    return Volume(np.random.default_rng(seed).uniform(-1, 1, shape), (1.0, 1.0, 1.0), f"rand{seed}")
