import numpy as np
import pytest

from fedsource.config import TEST_CONFIG
from fedsource.paillier import keygen
from fedsource.rng import DRBG
from fedsource.transport import local_sessions


@pytest.fixture(scope="session")
def keys_a():
    return keygen(512, "A", DRBG("keys-a"))


@pytest.fixture(scope="session")
def keys_b():
    return keygen(512, "B", DRBG("keys-b"))


@pytest.fixture
def sessions(keys_a, keys_b):
    """Factory for connected in-process (A, B) sessions."""
    opened = []

    def make(seed_a=11, seed_b=22, trace=False, config=TEST_CONFIG):
        sa, sb = local_sessions(config, keys_a, keys_b, seed_a, seed_b, trace=trace, timeout=60)
        opened.extend([sa, sb])
        return sa, sb

    yield make
    for s in opened:
        s.close()


@pytest.fixture
def gen():
    return np.random.default_rng(1234)
