"""Synthetic dataset generator: determinism, pairing, shift geometry, I/O."""

import numpy as np
import pytest

from stainlab import stains, synth
from stainlab.errors import ConfigInvalid, DataMissing


def cfg48(**kw):
    return synth.SynthConfig(**{"image_size": 48, "seed": 0, **kw})


# ----------------------------------------------------------- config


def test_config_validation_errors():
    with pytest.raises(ConfigInvalid):
        cfg48(image_size=8).validate()
    with pytest.raises(ConfigInvalid):
        cfg48(noise_sigma=-0.1).validate()
    with pytest.raises(ConfigInvalid):
        cfg48(n_blobs=(3, 2)).validate()
    with pytest.raises(ConfigInvalid):
        cfg48(n_blobs=(0, 2)).validate()
    with pytest.raises(ConfigInvalid):
        cfg48(stain_matrix=np.ones((2, 3))).validate()
    with pytest.raises(ConfigInvalid):
        cfg48(stain_matrix=-stains.HE_REFERENCE).validate()
    with pytest.raises(ConfigInvalid):
        cfg48(stain_matrix=stains.HE_REFERENCE * 2.0).validate()
    with pytest.raises(ConfigInvalid):
        cfg48(concentration_scale=(1.0, 0.0)).validate()
    with pytest.raises(ConfigInvalid):
        cfg48(stain_jitter=0.5).validate()
    cfg48().validate()


def test_config_hash_stable_and_sensitive():
    a = synth.config_hash(cfg48())
    b = synth.config_hash(cfg48())
    c = synth.config_hash(cfg48(seed=1))
    d = synth.config_hash(cfg48(noise_sigma=0.0))
    assert a == b
    assert len(a) == 16
    assert a != c and a != d


# ----------------------------------------------------------- determinism


def test_indexed_generation_is_deterministic():
    cfg = cfg48()
    a = synth.generate_indexed(cfg, 3)
    b = synth.generate_indexed(cfg, 3)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.mask, b.mask)
    assert np.array_equal(a.true_s, b.true_s)
    assert np.array_equal(a.true_c, b.true_c)


def test_indices_and_seeds_give_distinct_samples():
    cfg = cfg48()
    a = synth.generate_indexed(cfg, 0)
    b = synth.generate_indexed(cfg, 1)
    c = synth.generate_indexed(cfg48(seed=7), 0)
    assert not np.array_equal(a.image, b.image)
    assert not np.array_equal(a.image, c.image)


def test_single_stream_generate_consumes_rng():
    cfg = cfg48()
    rng = np.random.default_rng(0)
    a = synth.generate(cfg, rng)
    b = synth.generate(cfg, rng)
    assert not np.array_equal(a.image, b.image)


# ----------------------------------------------------------- ground truth


def test_noise_free_sample_reconstructs_from_ground_truth():
    cfg = cfg48(noise_sigma=0.0)
    s = synth.generate_indexed(cfg, 2)
    rerendered = stains.render(s.true_s, s.true_c, 48, 48)
    assert np.array_equal(s.image, rerendered)


def test_per_sample_jitter_varies_true_matrix():
    cfg = cfg48(stain_jitter=0.08)
    mats = [synth.generate_indexed(cfg, i).true_s for i in range(4)]
    assert not np.array_equal(mats[0], mats[1])
    for m in mats:
        assert np.allclose(np.linalg.norm(m, axis=0), 1.0)
        assert np.all(m >= 0)


def test_zero_jitter_pins_true_matrix():
    cfg = cfg48(stain_jitter=0.0)
    s = synth.generate_indexed(cfg, 0)
    assert np.allclose(s.true_s, cfg.stain_matrix)


def test_masks_nonempty_and_binary():
    cfg = cfg48()
    for i in range(30):
        mask = synth.generate_indexed(cfg, i).mask
        assert mask.dtype == bool
        assert mask.any(), f"sample {i} has an empty mask"
        assert not mask.all(), f"sample {i} is wall-to-wall foreground"


# ----------------------------------------------------------- domain pairs


def test_domain_pair_shares_structure_changes_color():
    cfg = cfg48()
    shift = synth.make_shift_matrix(cfg.stain_matrix, 15.0, elementwise=True)
    base, shifted = synth.make_domain_pair(cfg, shift, 4, start_index=10)
    for a, b in zip(base, shifted):
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.true_c, b.true_c)
        dist = np.mean(np.abs(a.image.astype(float) - b.image.astype(float)))
        assert dist > 5.0


def test_identity_shift_reproduces_originals():
    cfg = cfg48()
    base, shifted = synth.make_domain_pair(cfg, cfg.stain_matrix, 3)
    for a, b in zip(base, shifted):
        assert np.array_equal(a.image, b.image)


# ----------------------------------------------------------- shift geometry


def test_rotate_columns_zero_is_identity():
    out = synth.rotate_columns(stains.HE_REFERENCE, 0.0)
    assert np.allclose(out, stains.HE_REFERENCE, atol=1e-12)


def test_rotate_columns_moves_both_columns_by_angle():
    # the negative direction stays inside the nonnegative octant for this basis
    out = synth.rotate_columns(stains.HE_REFERENCE, -15.0)
    angles = stains.column_angles_deg(out, stains.HE_REFERENCE)
    assert np.allclose(angles, 15.0, atol=1e-6)
    assert np.allclose(np.linalg.norm(out, axis=0), 1.0)
    assert np.all(out >= 0)


def test_shift_matrix_picks_least_clipped_direction():
    out = synth.make_shift_matrix(stains.HE_REFERENCE, 15.0, elementwise=False)
    angles = stains.column_angles_deg(out, stains.HE_REFERENCE)
    assert np.allclose(angles, 15.0, atol=1e-6)


def test_shift_matrix_elementwise_skew():
    out = synth.make_shift_matrix(stains.HE_REFERENCE, 15.0, elementwise=True)
    angles = stains.column_angles_deg(out, stains.HE_REFERENCE)
    assert np.all(angles > 8.0) and np.all(angles < 25.0)
    assert np.allclose(np.linalg.norm(out, axis=0), 1.0)
    assert np.all(out >= 0)
    again = synth.make_shift_matrix(stains.HE_REFERENCE, 15.0, elementwise=True)
    assert np.array_equal(out, again)


# ----------------------------------------------------------- directory I/O


def test_save_load_roundtrip(tmp_path):
    cfg = cfg48()
    samples = [synth.generate_indexed(cfg, i) for i in range(3)]
    d = tmp_path / "split"
    synth.save_split(str(d), samples, cfg, extra_meta={"role": "val"})
    loaded, meta = synth.load_split(str(d))
    assert len(loaded) == 3
    assert meta["config_hash"] == synth.config_hash(cfg)
    assert meta["seed"] == 0 and meta["image_size"] == 48
    assert meta["role"] == "val"
    for s, entry in zip(samples, loaded):
        assert np.array_equal(s.image, entry["image"])
        assert np.array_equal(s.mask, entry["mask"])
        assert np.allclose(s.true_s, entry["true_s"], atol=1e-12)


def test_load_missing_meta_raises(tmp_path):
    with pytest.raises(DataMissing):
        synth.load_split(str(tmp_path))


def test_load_missing_image_raises(tmp_path):
    cfg = cfg48()
    samples = [synth.generate_indexed(cfg, 0)]
    d = tmp_path / "split"
    synth.save_split(str(d), samples, cfg)
    (d / "image_0000.png").unlink()
    with pytest.raises(DataMissing):
        synth.load_split(str(d))
