import numpy as np
import pytest

from fourier_age.clip_align import AlignmentConfig
from fourier_age.config import EnsembleTrainConfig, RunConfig
from fourier_age.correction import CorrectionConfig
from fourier_age.data import generate_synthetic


def tiny_config(**kw) -> RunConfig:
    """Seconds-scale configuration for plumbing tests."""
    cfg = RunConfig(
        alignment=AlignmentConfig(dim=8, image_size=16, patch=4, encoder_blocks=1, decoder_depth=1,
                                  context_len=3),
        correction=CorrectionConfig(max_iters=3, candidates=8, ensemble_size=2),
        ensemble=EnsembleTrainConfig(hidden=16, steps=30, batch=64, candidates_per_sample=4,
                                     weight_steps=20, generator_steps=5),
        epochs=1, batch_size=16)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(seed=5, n=60, size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
