import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_model_raw(**overrides):
    """Raw config dict for a fast depth-3 model on 32px inputs."""
    raw = {
        "synth": {"image_size": 32, "seed": 0},
        "model": {
            "variant": "STINV_CA",
            "attach_stage": 1,
            "encoder_channels": [8, 16, 32],
            "input_size": 32,
        },
        "train": {"epochs": 1, "batch_size": 4, "seed": 0},
    }
    for section, values in overrides.items():
        raw.setdefault(section, {}).update(values)
    return raw


def tiny_samples(count, image_size=32, seed=0, cfg_overrides=None):
    """Synthetic samples as the dict shape the trainer consumes."""
    from stainlab import synth

    kwargs = {"image_size": image_size, "seed": seed}
    if cfg_overrides:
        kwargs.update(cfg_overrides)
    cfg = synth.SynthConfig(**kwargs)
    out = []
    for i in range(count):
        s = synth.generate_indexed(cfg, i)
        out.append({"image": s.image, "mask": s.mask, "true_s": s.true_s})
    return out
