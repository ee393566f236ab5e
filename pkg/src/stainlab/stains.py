"""Optical density math: stain-vector estimation, deconvolution,
normalization and stain-space augmentation.

Images are uint8 RGB arrays of shape (H, W, 3).  A stain matrix is a
3x2 float64 array whose columns are unit-norm, nonnegative OD
directions; column 0 is the hematoxylin-like stain (the larger angle in
the estimation plane), column 1 the eosin-like one.  Concentrations are
(2, H*W) nonnegative arrays.  All chemistry runs in float64; only the
network sees float32.
"""

import numpy as np

from .eig3 import eig3_symmetric
from .errors import DegenerateStain, InsufficientTissue, ShapeMismatch

I0_DEFAULT = 255.0
BETA_DEFAULT = 0.15
ALPHA_PCT_DEFAULT = 1.0
MIN_TISSUE_PIXELS = 100
EIGENVALUE_RATIO_FLOOR = 1e-8

# Classic H&E optical-density directions (columns: hematoxylin, eosin).
HE_REFERENCE = None  # filled in below once _unit_columns exists


def _unit_columns(mat):
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=0)
    if np.any(norms <= 0):
        raise ShapeMismatch("stain matrix has a zero column")
    return mat / norms


def _check_rgb(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"expected an (H, W, 3) image, got {img.shape}")
    return img


def rgb_to_od(img, i0=I0_DEFAULT):
    """Beer-Lambert conversion; zeros are clamped to 1 before the log."""
    img = _check_rgb(img)
    if i0 <= 0:
        raise ShapeMismatch(f"reference white must be positive, got {i0}")
    vals = np.maximum(img.astype(np.float64), 1.0)
    return -np.log10(vals / float(i0))


def od_to_rgb(od, i0=I0_DEFAULT):
    """Inverse of rgb_to_od, clamped and rounded to 8-bit."""
    rgb = float(i0) * np.power(10.0, -np.asarray(od, dtype=np.float64))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render(stain_matrix, concentrations, height, width, i0=I0_DEFAULT):
    """Beer-Lambert synthesis of an (H, W, 3) uint8 image."""
    od = (np.asarray(stain_matrix, dtype=np.float64) @ concentrations).T.reshape(height, width, 3)
    return od_to_rgb(od, i0)


def _orient_plane(e1, e2, mean_od):
    """Resolve eigenvector sign ambiguity against the data.

    e1 points toward the tissue mean so projected angles cluster near
    zero; e2's sign is pinned through the plane normal so the angle
    ordering of the two stains is reproducible across images.
    """
    if float(mean_od @ e1) < 0:
        e1 = -e1
    normal = np.cross(e1, e2)
    # pick the component with the most leverage to avoid a near-zero test;
    # the sign choice makes the hematoxylin-like stain the larger angle
    k = int(np.argmax(np.abs(normal)))
    if normal[k] > 0:
        e2 = -e2
    return e1, e2


def _nonnegative_unit(vec):
    if vec.sum() < 0:
        vec = -vec
    vec = np.clip(vec, 0.0, None)
    norm = np.linalg.norm(vec)
    if norm <= 0:
        raise DegenerateStain("stain direction collapsed to zero after sign correction")
    return vec / norm


def estimate_stain_matrix(
    img,
    beta=BETA_DEFAULT,
    alpha_pct=ALPHA_PCT_DEFAULT,
    i0=I0_DEFAULT,
    min_tissue_pixels=MIN_TISSUE_PIXELS,
):
    """Recover the 3x2 stain matrix of an image (Macenko percentile method).

    Keeps pixels with any OD channel above ``beta``, eigendecomposes
    their covariance, projects onto the dominant plane and takes the
    ``alpha_pct`` / ``100 - alpha_pct`` percentile angle directions as
    the two stains.
    """
    od = rgb_to_od(img, i0).reshape(-1, 3)
    tissue = od[(od > beta).any(axis=1)]
    if tissue.shape[0] < min_tissue_pixels:
        raise InsufficientTissue(
            f"{tissue.shape[0]} tissue pixels above OD {beta}, need {min_tissue_pixels}"
        )

    mean_od = tissue.mean(axis=0)
    centered = tissue - mean_od
    cov = centered.T @ centered / tissue.shape[0]
    evals, evecs = eig3_symmetric(cov)
    if evals[0] <= 0 or evals[1] < EIGENVALUE_RATIO_FLOOR * evals[0]:
        raise DegenerateStain(
            f"OD scatter is effectively rank one (eigenvalues {evals[0]:.3e}, {evals[1]:.3e})"
        )

    e1, e2 = _orient_plane(evecs[:, 0], evecs[:, 1], mean_od)
    proj = tissue @ np.stack([e1, e2], axis=1)
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, alpha_pct)
    hi = np.percentile(phi, 100.0 - alpha_pct)

    v_hi = _nonnegative_unit(np.cos(hi) * e1 + np.sin(hi) * e2)
    v_lo = _nonnegative_unit(np.cos(lo) * e1 + np.sin(lo) * e2)
    # larger in-plane angle is the hematoxylin-like column
    return np.stack([v_hi, v_lo], axis=1)


def deconvolve(img, stain_matrix, i0=I0_DEFAULT):
    """Per-pixel least squares for concentrations; negatives clipped."""
    stain_matrix = np.asarray(stain_matrix, dtype=np.float64)
    if stain_matrix.shape != (3, 2):
        raise ShapeMismatch(f"stain matrix must be 3x2, got {stain_matrix.shape}")
    od = rgb_to_od(img, i0).reshape(-1, 3)
    conc, *_ = np.linalg.lstsq(stain_matrix, od.T, rcond=None)
    return np.clip(conc, 0.0, None)


def max_concentrations(concentrations, pct=99.0):
    """Robust per-stain maximum, the classic 99th percentile."""
    return np.percentile(concentrations, pct, axis=1)


def normalize_to_reference(img, ref_matrix, ref_maxc, i0=I0_DEFAULT, **estimate_kwargs):
    """Re-render an image through a reference stain basis.

    Estimates the image's own stain matrix, rescales each stain's 99th
    percentile concentration to ``ref_maxc`` and synthesizes through
    ``ref_matrix``.
    """
    img = _check_rgb(img)
    own = estimate_stain_matrix(img, i0=i0, **estimate_kwargs)
    conc = deconvolve(img, own, i0)
    scale = np.asarray(ref_maxc, dtype=np.float64) / np.maximum(max_concentrations(conc), 1e-6)
    conc = conc * scale[:, None]
    h, w = img.shape[:2]
    return render(np.asarray(ref_matrix, dtype=np.float64), conc, h, w, i0)


def _rerender(img, stain_matrix, concentrations, i0):
    h, w = img.shape[:2]
    return render(stain_matrix, concentrations, h, w, i0)


def _estimate_and_deconvolve(img, stain_matrix, concentrations, i0):
    if stain_matrix is None:
        stain_matrix = estimate_stain_matrix(img, i0=i0)
    if concentrations is None:
        concentrations = deconvolve(img, stain_matrix, i0)
    return stain_matrix, concentrations


def perturb_stain_light(stain_matrix, rng, scale_range=(0.95, 1.05), shift_range=(-0.05, 0.05)):
    """One scalar scale and one scalar shift per stain column."""
    out = np.array(stain_matrix, dtype=np.float64, copy=True)
    for j in range(out.shape[1]):
        scale = rng.uniform(*scale_range)
        shift = rng.uniform(*shift_range)
        out[:, j] = out[:, j] * scale + shift
    return _unit_columns(np.clip(out, 0.0, None))


def perturb_stain_strong(stain_matrix, rng, elem_range=(0.8, 1.2)):
    """Independent multiplicative factor on every matrix entry."""
    factors = rng.uniform(elem_range[0], elem_range[1], size=np.shape(stain_matrix))
    out = np.asarray(stain_matrix, dtype=np.float64) * factors
    return _unit_columns(np.clip(out, 0.0, None))


def augment_stain_light(
    img,
    rng,
    scale_range=(0.95, 1.05),
    shift_range=(-0.05, 0.05),
    stain_matrix=None,
    concentrations=None,
    i0=I0_DEFAULT,
):
    """Re-render through a lightly perturbed copy of the image's stains.

    ``stain_matrix``/``concentrations`` can be passed in to skip the
    estimation when the caller already holds them (the training loop
    caches both).
    """
    img = _check_rgb(img)
    stain_matrix, concentrations = _estimate_and_deconvolve(img, stain_matrix, concentrations, i0)
    perturbed = perturb_stain_light(stain_matrix, rng, scale_range, shift_range)
    return _rerender(img, perturbed, concentrations, i0)


def augment_stain_strong(
    img,
    rng,
    elem_range=(0.8, 1.2),
    stain_matrix=None,
    concentrations=None,
    i0=I0_DEFAULT,
):
    """Elementwise stain-matrix perturbation, the aggressive variant."""
    img = _check_rgb(img)
    stain_matrix, concentrations = _estimate_and_deconvolve(img, stain_matrix, concentrations, i0)
    perturbed = perturb_stain_strong(stain_matrix, rng, elem_range)
    return _rerender(img, perturbed, concentrations, i0)


def _rgb_to_hsv(rgb):
    """Vectorized RGB [0,1] -> HSV [0,1]."""
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    # hue sector by which channel is the max
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.maximum(delta, 1e-12)
    h = np.where(
        maxc == r,
        ((g - b) / safe) % 6.0,
        np.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta == 0, 0.0, h / 6.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _draw(value, rng):
    if isinstance(value, (tuple, list)):
        return rng.uniform(value[0], value[1])
    return float(value)


def augment_hsv(img, rng=None, h_shift=0.0, s_scale=1.0, v_scale=1.0):
    """Hue shift (degrees) plus saturation/value scaling.

    Scalar arguments apply exactly; (lo, hi) pairs are drawn uniformly
    with ``rng``.  This is the conventional color-jitter baseline, kept
    for comparison runs only.
    """
    img = _check_rgb(img)
    h_shift = _draw(h_shift, rng)
    s_scale = _draw(s_scale, rng)
    v_scale = _draw(v_scale, rng)
    hsv = _rgb_to_hsv(img.astype(np.float64) / 255.0)
    hsv[..., 0] = (hsv[..., 0] + h_shift / 360.0) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * s_scale, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * v_scale, 0.0, 1.0)
    rgb = _hsv_to_rgb(hsv)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def column_angles_deg(a, b):
    """Per-column angle in degrees between two stain matrices."""
    ua = _unit_columns(a)
    ub = _unit_columns(b)
    cos = np.clip((ua * ub).sum(axis=0), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def stain_to_list(stain_matrix):
    """Row-major 6-number list for JSON round-trips."""
    arr = np.asarray(stain_matrix, dtype=np.float64)
    if arr.shape != (3, 2):
        raise ShapeMismatch(f"stain matrix must be 3x2, got {arr.shape}")
    return arr.reshape(-1).tolist()


def stain_from_list(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != 6:
        raise ShapeMismatch(f"stain matrix list must hold 6 numbers, got {arr.size}")
    return arr.reshape(3, 2)


HE_REFERENCE = _unit_columns(
    np.array(
        [
            [0.65, 0.07],
            [0.70, 0.99],
            [0.29, 0.11],
        ]
    )
)
