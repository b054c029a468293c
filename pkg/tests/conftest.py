import numpy as np
import pytest

from evbridge.events import EventStream


def make_stream(rng, n, width=24, height=24, tmax=30000, label=None):
    """Random valid event stream with sorted timestamps."""
    ts = np.sort(rng.integers(0, tmax, n))
    return EventStream(rng.integers(0, width, n), rng.integers(0, height, n),
                       ts, rng.choice([-1, 1], n), width, height, label=label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
