import numpy as np
import pytest

from fogstat import dataio


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Small synthetic dataset shared by CLI and trainer tests."""
    out = tmp_path_factory.mktemp("synth")
    manifest = dataio.generate_dataset(str(out), n_events=6, n_frames=2,
                                       size=32, seed=11)
    return str(out), manifest


def rel_err(a, b):
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def central_diff(f, arr, index, h=1e-5):
    flat = arr.ravel()
    orig = flat[index]
    flat[index] = orig + h
    fp = f()
    flat[index] = orig - h
    fm = f()
    flat[index] = orig
    return (fp - fm) / (2 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
