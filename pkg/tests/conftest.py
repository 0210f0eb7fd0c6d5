import json

import pytest

from config import TrainConfig
from data import generate_synthetic3d, normalize, save_viewset

# small enough that a few epochs run in well under a second
TINY_OVERRIDES = {
    "dim_z": 4,
    "dim_c": 4,
    "epochs": 3,
    "encoder_widths": [8],
    "adapter_width": 8,
    "trunk_widths": [8],
    "decoder_widths": [8],
    "discriminator_widths": [4],
    "n_omega": 3,
    "kmeans_restarts": 2,
}


@pytest.fixture
def tiny_config() -> TrainConfig:
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in TINY_OVERRIDES.items()}
    return TrainConfig(**values).validate()


@pytest.fixture
def tiny_data():
    return normalize(generate_synthetic3d(seed=42, n_per_cluster=10), "minmax")


@pytest.fixture
def dataset_dir(tmp_path):
    path = tmp_path / "synth"
    save_viewset(generate_synthetic3d(seed=7, n_per_cluster=10), str(path))
    return str(path)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_OVERRIDES))
    return str(path)


@pytest.fixture
def tiny_overrides():
    return dict(TINY_OVERRIDES)
