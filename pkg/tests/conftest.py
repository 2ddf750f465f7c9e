import numpy as np
import pytest

from hgan.ingest import SyntheticConfig, generate_synthetic, load_dataset
from hgan.train import TrainConfig

# Small-model settings that train to perfect recall on the synthetic set in seconds.
DESK = dict(D=32, H=4, M=2, d_p=16, gru_hidden=16, batch_size=16, base_lr=5e-3, decay_every=1000)


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK, **overrides})


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(SyntheticConfig(n_groups=32, seed=7), out)
    return out


@pytest.fixture(scope="session")
def synthetic(synthetic_dir):
    return load_dataset(synthetic_dir / "manifest.json")


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    generate_synthetic(SyntheticConfig(n_groups=6, m=2, k=3, l=4, D0=8, D1=6, seed=3, ragged=True), out)
    return out


@pytest.fixture(scope="session")
def small(small_dir):
    return load_dataset(small_dir / "manifest.json")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
