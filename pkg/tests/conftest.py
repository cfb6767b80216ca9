"""Shared fixtures: double precision, seeded generators and tiny model configurations."""
import numpy as np
import pytest
import tensorflow as tf

from libs.speech_mamba.NeuralCore import set_seed
from libs.speech_mamba.SpeechMambaNetworks import ModelConfig

tf.keras.backend.set_floatx("float64")


@pytest.fixture(autouse=True)
def seeded():
    """Every test starts from the same global seed."""
    set_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(
        d_model=16,
        num_heads=2,
        encoder_blocks=2,
        decoder_blocks=1,
        conv_width=4,
        ssm_state=4,
        expand=2,
        vocab_size=8,
        dropout_p=0.0,
        frontend_channels=(4, 4),
        n_mels=8,
        transformer_encoder_blocks=2,
        transformer_decoder_blocks=1,
        ffn_dim=32,
    )
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_transformer_config():
    return tiny_model_config(mamba_encoder=False, mamba_decoder=False)
