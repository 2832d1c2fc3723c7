import numpy as np
import pytest
import torch

from surfmap.dataset import GenConfig, generate_dataset, load_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    """4 instances x 24 views of the default category at 64x64."""
    root = tmp_path_factory.mktemp("small_ds")
    generate_dataset(GenConfig(out_dir=str(root), n_instances=4, n_views=24, split=(0.5, 0.25, 0.25)))
    return root


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    return load_dataset(small_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
