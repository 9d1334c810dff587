import numpy as np
import pytest

from config.settings import load_run_config
from utils.encoders import EncoderConfig
from utils.synthetic import SyntheticCorpusSpec, generate_synthetic_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_encoder():
    return EncoderConfig(image_side=3, patch_size=1, backbone_dim=6, shared_dim=4, backbone_kind="feature-file")


TINY_SPEC = SyntheticCorpusSpec(
    categories=3,
    instances_per_category=2,
    test_instances_per_category=1,
    frames_per_instance=3,
    grid=4,
    patch_size=2,
    feature_dim=8,
    web_images_per_category=2,
    eval_scenes=3,
    interactive_scenes=2,
)


@pytest.fixture
def tiny_corpus(tmp_path):
    return generate_synthetic_corpus(TINY_SPEC, 3, tmp_path / "corpus")


def tiny_overrides(out_dir, **extra):
    overrides = {
        "out": str(out_dir),
        "seed": "3",
        "image_side": "8",
        "patch_size": "2",
        "backbone_dim": "8",
        "shared_dim": "4",
        "stage1_epochs": "2",
        "stage2_epochs": "1",
        "frozen_epochs": "1",
        "batch_size": "4",
        "steps_per_epoch": "2",
    }
    overrides.update({key: str(value) for key, value in extra.items()})
    return overrides


@pytest.fixture
def tiny_config(tmp_path, tiny_corpus):
    return load_run_config(overrides=tiny_overrides(tmp_path), environ={})


@pytest.fixture
def make_config(tmp_path, tiny_corpus):
    def build(**extra):
        return load_run_config(overrides=tiny_overrides(tmp_path, **extra), environ={})
    return build
