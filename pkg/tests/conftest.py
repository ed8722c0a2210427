import numpy as np
import pytest

from duostream.core import ImageBuffer, MaskBuffer, RngState
from duostream.model import ModelConfig
from duostream.synthgen import AugmentPolicy, generate_toy_dataset
from duostream.trainer import DiffusionConfig, TrainConfig


def rand_image(h=8, w=8, c=3, seed=0):
    gen = np.random.default_rng(seed)
    return ImageBuffer(gen.uniform(size=(h, w, c)))


def rand_mask(h=8, w=8, seed=0, p=0.5):
    gen = np.random.default_rng(seed)
    return MaskBuffer((gen.uniform(size=(h, w)) < p).astype(np.float64))


@pytest.fixture
def rng():
    return RngState(1234)


TINY_MODEL = ModelConfig(in_channels=3, base_width=4, num_levels=2,
                         blocks_per_level=2, norm_groups=2, image_size=16)


def tiny_train_config(checkpoint_dir, **kw):
    defaults = dict(seg_batch=3, rec_batch=3, learning_rate=1e-3, epochs=2,
                    seed=7, checkpoint_dir=str(checkpoint_dir),
                    diffusion=DiffusionConfig(steps=20),
                    augment=AugmentPolicy.identity())
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Six 16x16 toy scenes with masks, shared by trainer and CLI tests."""
    root = tmp_path_factory.mktemp("toydata")
    return generate_toy_dataset(root, count=6, canvas_size=16,
                                objects_range=(1, 2),
                                rng=RngState(42).child("fixture"))
