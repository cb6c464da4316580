import numpy as np
import pytest
import torch

from smcd import DenoiserConfig, TextEmbedder

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def micro_config():
    """Tiny model: F=2, 4x4 latent with 3 channels, 8 base channels."""
    return DenoiserConfig(
        base_channels=8, channel_mult=(1, 2), num_heads=1, text_dim=8,
        frames=2, latent_channels=3, latent_h=4, latent_w=4, fourier_freqs=2,
    )


@pytest.fixture(scope="session")
def micro_embedder(micro_config):
    return TextEmbedder(seed=0, dim=micro_config.text_dim)


@pytest.fixture(scope="session")
def desk_config():
    return DenoiserConfig()


def softmax_oracle(logits):
    """Plain scalar softmax used to hand-check attention outputs."""
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max())
    return e / e.sum()
