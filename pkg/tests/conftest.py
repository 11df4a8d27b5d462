import numpy as np
import pytest
import torch

from sci3d.data import SceneSpec, generate_scene, read_dataset, write_dataset
from sci3d.seeding import derive_seed

torch.set_num_threads(1)


TINY_SPEC = SceneSpec(
    video_len=32,
    atomic_len=8,
    num_objects_min=2,
    num_objects_max=2,
    events_min=2,
    events_max=2,
)


def make_videos(spec, count, base_seed=0):
    return [generate_scene(derive_seed(base_seed, "video", i), spec) for i in range(count)]


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """A small on-disk dataset shared by data, train, and cli tests."""
    root = tmp_path_factory.mktemp("tiny_ds")
    videos = make_videos(TINY_SPEC, 14, base_seed=11)
    splits = ["train"] * 10 + ["val"] * 4
    write_dataset(videos, root, splits)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return read_dataset(tiny_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
