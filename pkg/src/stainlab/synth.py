"""Synthetic two-stain image generator with exact ground truth.

Each sample is built in concentration space: smooth blob structures
(the segmentation targets) carry stain 0, a low-frequency textured
background carries stain 1, and the image is rendered through the
Beer-Lambert law.  Because the generator knows the true stain matrix
and concentrations, estimation and normalization code can be tested
against construction rather than against another implementation.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import stains
from .errors import ConfigInvalid, DataMissing

BLOB_THRESHOLD = 0.5
BLOB_SIGMA_RANGE = (0.08, 0.18)  # fraction of image size
TEXTURE_WAVES = 4
TEXTURE_RANGE = (0.35, 1.0)


@dataclass
class SynthConfig:
    image_size: int = 96
    n_blobs: tuple = (2, 5)
    stain_matrix: np.ndarray = field(default_factory=lambda: stains.HE_REFERENCE.copy())
    concentration_scale: tuple = (1.0, 0.7)
    noise_sigma: float = 1.0
    seed: int = 0
    # per-image multiplicative jitter of the stain matrix entries; gives
    # every sample its own ground-truth matrix so a stain regressor has
    # a non-constant target to learn
    stain_jitter: float = 0.08

    def validate(self):
        if self.image_size < 16:
            raise ConfigInvalid(f"synth.image_size must be >= 16, got {self.image_size}")
        if self.noise_sigma < 0:
            raise ConfigInvalid(f"synth.noise_sigma must be >= 0, got {self.noise_sigma}")
        lo, hi = self.n_blobs
        if lo < 1 or hi < lo:
            raise ConfigInvalid(f"synth.n_blobs must be a 1 <= lo <= hi range, got {self.n_blobs}")
        mat = np.asarray(self.stain_matrix, dtype=np.float64)
        if mat.shape != (3, 2):
            raise ConfigInvalid(f"synth.stain_matrix must be 3x2, got {mat.shape}")
        if np.any(mat < 0):
            raise ConfigInvalid("synth.stain_matrix entries must be >= 0")
        if np.any(np.abs(np.linalg.norm(mat, axis=0) - 1.0) > 1e-5):
            raise ConfigInvalid("synth.stain_matrix columns must be unit norm")
        if len(self.concentration_scale) != 2 or any(s <= 0 for s in self.concentration_scale):
            raise ConfigInvalid(f"synth.concentration_scale must be two positives, got {self.concentration_scale}")
        if not 0.0 <= self.stain_jitter < 0.5:
            raise ConfigInvalid(f"synth.stain_jitter must lie in [0, 0.5), got {self.stain_jitter}")
        return self


@dataclass
class SynthSample:
    image: np.ndarray
    mask: np.ndarray
    true_s: np.ndarray
    true_c: np.ndarray


def config_hash(cfg):
    """Stable short hash of a config dataclass (for manifests)."""
    payload = {}
    for key, value in vars(cfg).items():
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif isinstance(value, tuple):
            value = list(value)
        payload[key] = value
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _blob_field(size, cfg, rng):
    """Sum of random gaussians; every peak clears the mask threshold."""
    n = int(rng.integers(cfg.n_blobs[0], cfg.n_blobs[1] + 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    fieldsum = np.zeros((size, size))
    for _ in range(n):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(*BLOB_SIGMA_RANGE) * size
        fieldsum += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
    return fieldsum


def _texture_field(size, rng):
    """Low-frequency cosine mixture mapped into TEXTURE_RANGE."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    tex = np.zeros((size, size))
    for _ in range(TEXTURE_WAVES):
        fy, fx = rng.uniform(-3.0, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        tex += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    lo, hi = tex.min(), tex.max()
    unit = (tex - lo) / max(hi - lo, 1e-9)
    return TEXTURE_RANGE[0] + unit * (TEXTURE_RANGE[1] - TEXTURE_RANGE[0])


def _jitter_matrix(base, jitter, rng):
    if jitter <= 0:
        return np.array(base, dtype=np.float64, copy=True)
    factors = rng.uniform(1.0 - jitter, 1.0 + jitter, size=(3, 2))
    mat = np.clip(np.asarray(base, dtype=np.float64) * factors, 0.0, None)
    return mat / np.linalg.norm(mat, axis=0)


def _concentrations(cfg, rng):
    """Blob/background concentration fields plus the binary mask."""
    size = cfg.image_size
    blobs = _blob_field(size, cfg, rng)
    mask = blobs > BLOB_THRESHOLD
    # ramp from 0 at the blob boundary to 1 in the core: blob cores are
    # near-pure stain 0, which anchors the percentile angles
    ramp = np.clip((blobs - BLOB_THRESHOLD) / (1.0 - BLOB_THRESHOLD), 0.0, 1.0)
    c0 = cfg.concentration_scale[0] * ramp
    texture = _texture_field(size, rng)
    c1 = cfg.concentration_scale[1] * texture * np.clip(1.0 - 1.2 * ramp, 0.0, 1.0)
    conc = np.stack([c0.reshape(-1), c1.reshape(-1)], axis=0)
    return conc, mask


def _render_sample(cfg, matrix, conc, mask, noise_rng):
    size = cfg.image_size
    img = stains.render(matrix, conc, size, size).astype(np.float64)
    if cfg.noise_sigma > 0:
        img = img + noise_rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SynthSample(image=img, mask=mask, true_s=matrix, true_c=conc)


def _sample_rngs(seed, index):
    """Independent per-sample streams for fields, jitter and noise."""
    make = lambda tag: np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index, tag])))
    return make(0), make(1), make(2)


def generate(cfg, rng):
    """One sample from a caller-supplied generator (single-stream use)."""
    cfg.validate()
    conc, mask = _concentrations(cfg, rng)
    matrix = _jitter_matrix(cfg.stain_matrix, cfg.stain_jitter, rng)
    return _render_sample(cfg, matrix, conc, mask, rng)


def generate_indexed(cfg, index, base_matrix=None):
    """Sample ``index`` of the dataset defined by (cfg, cfg.seed).

    ``base_matrix`` overrides the stain matrix while leaving the
    concentration fields, mask, jitter draw and pixel noise untouched;
    rendering the same index through two matrices yields a perfectly
    paired domain shift.
    """
    cfg.validate()
    field_rng, jitter_rng, noise_rng = _sample_rngs(cfg.seed, index)
    conc, mask = _concentrations(cfg, field_rng)
    base = cfg.stain_matrix if base_matrix is None else base_matrix
    matrix = _jitter_matrix(base, cfg.stain_jitter, jitter_rng)
    return _render_sample(cfg, matrix, conc, mask, noise_rng)


def make_domain_pair(cfg, shift_matrix, count, start_index=0):
    """Paired sets: same structures, different stain rendering.

    Returns (originals, shifted) lists of SynthSample; sample i shares
    its mask and concentrations across the two lists.
    """
    originals = [generate_indexed(cfg, start_index + i) for i in range(count)]
    shifted = [generate_indexed(cfg, start_index + i, base_matrix=shift_matrix) for i in range(count)]
    return originals, shifted


def rotate_columns(matrix, degrees):
    """Rotate both stain vectors by the same angle inside their span.

    The inter-stain angle is preserved, so the shift is a pure
    re-coloring with unchanged separability.
    """
    mat = np.asarray(matrix, dtype=np.float64)
    u1 = mat[:, 0] / np.linalg.norm(mat[:, 0])
    v = mat[:, 1] - (mat[:, 1] @ u1) * u1
    u2 = v / np.linalg.norm(v)
    theta = np.radians(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    out = np.empty_like(mat)
    for j in range(2):
        a, b = mat[:, j] @ u1, mat[:, j] @ u2
        ra, rb = a * cos - b * sin, a * sin + b * cos
        col = np.clip(ra * u1 + rb * u2, 0.0, None)
        out[:, j] = col / np.linalg.norm(col)
    return out


SHIFT_ELEM_PATTERN = np.array([[1.06, 0.94], [0.95, 1.05], [1.08, 0.92]])


def make_shift_matrix(base, rotate_deg=15.0, elementwise=True):
    """The standard held-out stain: rotate columns, then fixed per-entry skew.

    Rotation direction is chosen so the nonnegativity clip bites as
    little as possible, keeping the realized angle close to nominal.
    """
    candidates = [rotate_columns(base, s * rotate_deg) for s in (1.0, -1.0)]
    realized = [stains.column_angles_deg(m, base).min() for m in candidates]
    out = candidates[int(np.argmax(realized))]
    if elementwise:
        out = np.clip(out * SHIFT_ELEM_PATTERN, 0.0, None)
        out = out / np.linalg.norm(out, axis=0)
    return out


# ---------------------------------------------------------------------------
# dataset directory I/O


def save_split(directory, samples, cfg, extra_meta=None):
    """Write image/mask PNG pairs plus a meta.json sidecar."""
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        image_name = f"image_{i:04d}.png"
        mask_name = f"mask_{i:04d}.png"
        Image.fromarray(sample.image, mode="RGB").save(os.path.join(directory, image_name))
        Image.fromarray((sample.mask.astype(np.uint8)) * 255, mode="L").save(os.path.join(directory, mask_name))
        entries.append({"image": image_name, "mask": mask_name, "true_s": stains.stain_to_list(sample.true_s)})
    meta = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "image_size": cfg.image_size,
        "samples": entries,
    }
    meta.update(extra_meta or {})
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_split(directory):
    """Read a split back: list of dicts with image, mask, true_s."""
    from PIL import Image

    meta_path = os.path.join(directory, "meta.json")
    if not os.path.isfile(meta_path):
        raise DataMissing(f"no dataset meta.json in {directory}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    out = []
    for entry in meta["samples"]:
        image_path = os.path.join(directory, entry["image"])
        mask_path = os.path.join(directory, entry["mask"])
        if not os.path.isfile(image_path):
            raise DataMissing(f"missing image file {image_path}")
        if not os.path.isfile(mask_path):
            raise DataMissing(f"missing mask file {mask_path}")
        image = np.asarray(Image.open(image_path).convert("RGB"))
        mask = np.asarray(Image.open(mask_path).convert("L")) > 127
        out.append({"image": image, "mask": mask, "true_s": stains.stain_from_list(entry["true_s"])})
    return out, meta
