import numpy as np
import pytest

from brainpair.data import AtlasVolume
from brainpair.model import EncoderConfig, GraphImageEncoder, build_predictor
from brainpair.synth import SynthConfig, generate_synthetic


TINY_ENCODER = dict(embed_dim=16, gat_width=4, cnn_channels=(2, 2, 2, 4))


@pytest.fixture(scope="session")
def tiny_dataset():
    """9 subjects x 3 tasks, 12 regions, 16^3 volumes; strong planted signal."""
    cfg = SynthConfig(n_subjects=9, n_tasks=3, n_rois=12, volume_shape=(16, 16, 16),
                      t_frames=48, signal_strength=3.0)
    return generate_synthetic(cfg, seed=7)


@pytest.fixture(scope="session")
def tiny_atlas(tiny_dataset):
    return tiny_dataset.atlas


def make_tiny_encoder(n_rois=12, image_shape=(16, 16, 16), seed=0, dtype="float32", **over):
    kw = dict(TINY_ENCODER)
    kw.update(over)
    cfg = EncoderConfig(n_rois=n_rois, image_shape=image_shape, dtype=dtype, **kw)
    return GraphImageEncoder(cfg, seed=seed)


@pytest.fixture()
def tiny_encoder():
    return make_tiny_encoder()


@pytest.fixture()
def tiny_predictor(tiny_encoder):
    return build_predictor(tiny_encoder.config, seed=0)


def toy_atlas(shape=(4, 4, 5), n_rois=3, seed=0):
    """Random small atlas where every region is guaranteed voxels."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_rois + 1, size=shape).astype(np.int32)
    for r in range(1, n_rois + 1):
        labels[r - 1, 0, 0] = r
    return AtlasVolume(labels=labels, n_rois=n_rois).validate()
