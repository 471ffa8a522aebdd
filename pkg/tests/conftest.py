import numpy as np
import pytest

from cada.data import build_lexicon, build_vocabulary, generate_dataset, load_corpus
from cada.model import ModelConfig, build_model

# A model small enough for gradient checks and a few training steps.
TINY_MODEL = dict(
    image_size=32,
    channels=3,
    patch_size=16,
    image_layers=1,
    image_width=16,
    image_heads=2,
    text_layers=1,
    text_width=16,
    text_heads=2,
    max_len=16,
    latent_dim=8,
    mlp_ratio=2,
)

# Dotted parameters for RunExperiment / the command line at the same size.
TINY_PARAMS = {
    "data.ids": 6,
    "data.images_per_id": 2,
    "data.captions_per_image": 2,
    "data.test_fraction": 0.34,
    "train.epochs": 1,
    "train.batch_size": 4,
    "loss.group_size": 4,
    "loss.group_stride": 4,
    "eval.eta": 4,
    "printon": False,
    **{f"model.{k}": v for k, v in TINY_MODEL.items()},
}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def lexicon():
    return build_lexicon()


@pytest.fixture(scope="session")
def vocab(lexicon):
    return build_vocabulary(lexicon)


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(vocab_size=len(vocab), **TINY_MODEL)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(6, 2, 2, seed=3, out_dir=out, image_size=32, test_fraction=0.34)
    return out


@pytest.fixture(scope="session")
def corpus(dataset_dir):
    return load_corpus(dataset_dir)
