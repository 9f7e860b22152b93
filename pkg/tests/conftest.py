import numpy as np
import pytest

from e2caps.data import SyntheticFaceParams, generate_synthetic_dataset, load_arrays, split_indices


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 classes x 6 samples at 32 px; enough for loader and trainer plumbing."""
    root = tmp_path_factory.mktemp("small")
    params = SyntheticFaceParams(samples_per_class=6, image_size=32)
    return generate_synthetic_dataset(params, seed=3, out_dir=root)


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default synthetic set: 4 classes x 250 samples, seed 0."""
    root = tmp_path_factory.mktemp("default")
    return generate_synthetic_dataset(SyntheticFaceParams(), seed=0, out_dir=root)


@pytest.fixture(scope="session")
def default_arrays(default_dataset):
    ds = load_arrays(default_dataset, 64)
    return ds, split_indices(default_dataset)
