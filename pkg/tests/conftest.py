import numpy as np
import pytest
from hypothesis import settings

from patchfair.encoder import EncoderConfig, init_weights, EncoderModel, save_encoder, train_encoder
from patchfair.harness import partitions
from patchfair.synthdata import DatasetSpec, generate, save_dataset

settings.register_profile("patchfair", deadline=None, max_examples=40)
settings.load_profile("patchfair")


@pytest.fixture(scope="session")
def small_data():
    return generate(DatasetSpec(n=400, seed=3))


@pytest.fixture(scope="session")
def random_model():
    """Untrained encoder on 32x32x1 inputs."""
    return EncoderModel((32, 32, 1), init_weights((32, 32, 1), (8, 16), 3, seed=5, hidden=32))


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained encoder on 12x12x1 inputs, cheap enough for finite differences."""
    return EncoderModel((12, 12, 1), init_weights((12, 12, 1), (2, 3), 3, seed=1, hidden=4))


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """A small dataset and an encoder trained on it, both also written to disk."""
    root = tmp_path_factory.mktemp("trained")
    data = generate(DatasetSpec(n=2400, seed=0))
    enc_train, _, _ = partitions(data)
    model = train_encoder(enc_train, EncoderConfig(seed=0))
    save_dataset(data, root / "data.bin")
    save_encoder(model, root / "encoder.json")
    return {"data": data, "model": model, "dir": root,
            "dataset_path": root / "data.bin", "encoder_path": root / "encoder.json"}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
