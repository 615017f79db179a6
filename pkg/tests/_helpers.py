"""Shared test helpers."""
import numpy as np

from subjectdiff.backbone import BackboneConfig


def small_config(**kw):
    base = dict(latent_size=8, latent_channels=4, text_dim=16, image_tokens=4, encoder_dim=16, condition_dim=16,
                shallow_layers=2, encoder_depth=3, image_size=16, block_resolutions=(8, 4, 8), heads=2,
                model_dim=16, timesteps=20)
    base.update(kw)
    return BackboneConfig(**base)


def assert_bytes_equal(a, b):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape and a.dtype == b.dtype
    assert a.tobytes() == b.tobytes()
