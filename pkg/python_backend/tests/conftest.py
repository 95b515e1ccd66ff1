'''
Shared fixtures: a tiny corpus, its vocabulary and a tiny dual encoder.
'''

import numpy as np
import pytest

from data_synth import SynthConfig, build_vocabulary, generate_dataset
from encoders import ModelConfig, init_model

# -------------------------------------------------------------------------------------------------
# Corpus
# -------------------------------------------------------------------------------------------------

TINY_SYNTH = SynthConfig(n_attributes=2, primary_count=1, sibling_group=2, grid=2, channels=4)


@pytest.fixture(scope='session')
def vocab():
    return build_vocabulary()


@pytest.fixture
def tiny_synth():
    return TINY_SYNTH


@pytest.fixture
def tiny_records():
    '''Eight scenes in four sibling pairs; long captions are 18 words.'''
    return [s.as_record() for s in generate_dataset(3, 8, TINY_SYNTH)]


# -------------------------------------------------------------------------------------------------
# Models
# -------------------------------------------------------------------------------------------------

def tiny_model_config(vocab_size, **overrides):
    fields = dict(
        vocab_size=vocab_size, context_len=24, d_model=8, n_layers=1, n_heads=2,
        d_embed=8, image_grid=2, image_channels=4, init_seed=0, embed_init_std=0.5,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


@pytest.fixture
def tiny_config(vocab):
    return tiny_model_config(len(vocab))


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config)


@pytest.fixture
def tiny_model64(tiny_config):
    return init_model(tiny_config, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(array):
    array = np.asarray(array, dtype=np.float64)
    return array / np.linalg.norm(array, axis=1, keepdims=True)
