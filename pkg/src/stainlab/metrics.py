"""Segmentation scores and feature-distribution divergence.

Dice/precision/recall operate on binary masks.  The divergence side
treats each channel of a feature map as a Gaussian summarized by its
spatial mean and variance and accumulates symmetric KL across channels
and images; it is the lens used to ask how much a stain shift moves
the representation at every encoder stage.
"""

import numpy as np

from .engine.tensor import Tensor
from .errors import EmptySet, NonFiniteValue, ShapeMismatch
from .model import forward_eval, images_to_tensor

VARIANCE_FLOOR = 1e-8
PRED_THRESHOLD = 0.5


def _check_pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt):
    """2|A∩B| / (|A|+|B|); two empty masks count as a perfect 1.0."""
    pred, gt = _check_pair(pred, gt)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


def precision_recall(pred, gt):
    """(TP/(TP+FP), TP/(TP+FN)) with empty-denominator convention 1.0."""
    pred, gt = _check_pair(pred, gt)
    tp = float(np.logical_and(pred, gt).sum())
    fp = float(np.logical_and(pred, ~gt).sum())
    fn = float(np.logical_and(~pred, gt).sum())
    precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 1.0
    return precision, recall


def binarize_logits(logits):
    """Sigmoid-threshold logits at PRED_THRESHOLD (logit 0)."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return arr > 0.0


def sym_kl(mu_a, var_a, mu_b, var_b):
    """Symmetric Gaussian KL; inputs are per-channel means/variances.

    Each direction is log(s'/s) + (s^2 + (m - m')^2) / (2 s'^2) - 1/2
    with s the standard deviation; variances are floored at 1e-8.
    """
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    var_a = np.maximum(np.asarray(var_a, dtype=np.float64), VARIANCE_FLOOR)
    var_b = np.maximum(np.asarray(var_b, dtype=np.float64), VARIANCE_FLOOR)

    def one_way(m, v, m2, v2):
        return 0.5 * np.log(v2 / v) + (v + (m - m2) ** 2) / (2.0 * v2) - 0.5

    total = one_way(mu_a, var_a, mu_b, var_b) + one_way(mu_b, var_b, mu_a, var_a)
    if not np.all(np.isfinite(total)):
        raise NonFiniteValue("symmetric KL produced a non-finite value")
    return total


def _stage_moments(model, images, stage):
    """Per-image, per-channel spatial mean and variance at one stage."""
    was_training = model.training
    model.set_training(False)
    try:
        x = images_to_tensor(images, dtype=model.head.weight.data.dtype)
        feats, _ = model.encode(x, to_stage=stage)
    finally:
        model.set_training(was_training)
    f = feats[stage - 1].data
    mu = f.mean(axis=(2, 3))
    var = f.var(axis=(2, 3))
    return mu, var


def feature_divergence(model, set_a, set_b, stage):
    """Mean over images of the channel-averaged symmetric KL at a stage.

    ``set_a`` and ``set_b`` are paired uint8 image lists of equal
    length (index i compared with index i).
    """
    if len(set_a) == 0 or len(set_b) == 0:
        raise EmptySet("feature_divergence needs non-empty image sets")
    if len(set_a) != len(set_b):
        raise ShapeMismatch(f"paired sets differ in size: {len(set_a)} vs {len(set_b)}")
    mu_a, var_a = _stage_moments(model, np.stack(set_a), stage)
    mu_b, var_b = _stage_moments(model, np.stack(set_b), stage)
    per_channel = sym_kl(mu_a, var_a, mu_b, var_b)
    return float(per_channel.mean(axis=1).mean())


def mean_matrices(model, images, aug_images, stage, centered=False):
    """Average covariance and variance matrices over an image set."""
    from . import attention

    if len(images) == 0:
        raise EmptySet("mean_matrices needs at least one image")
    if len(images) != len(aug_images):
        raise ShapeMismatch(f"paired sets differ in size: {len(images)} vs {len(aug_images)}")
    was_training = model.training
    model.set_training(False)
    try:
        dtype = model.head.weight.data.dtype
        x = images_to_tensor(np.stack(images), dtype=dtype)
        xa = images_to_tensor(np.stack(aug_images), dtype=dtype)
        feats, _ = model.encode(x, to_stage=stage)
        feats_aug, _ = model.encode(xa, to_stage=stage)
        sigma = attention.covariance(feats[stage - 1], centered=centered)
        sigma_prime = attention.covariance(feats_aug[stage - 1], centered=centered)
        variance = attention.variance_matrix(sigma, sigma_prime)
    finally:
        model.set_training(was_training)
    return sigma.data.mean(axis=0), variance.data.mean(axis=0)


def evaluate_masks(model, samples, batch_size=8):
    """Dice/precision/recall of a frozen model over a sample list."""
    if len(samples) == 0:
        raise EmptySet("no samples to evaluate")
    dices, precisions, recalls = [], [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s["image"] for s in chunk])
        logits = forward_eval(model, images)
        preds = binarize_logits(logits)[:, 0]
        for pred, sample in zip(preds, chunk):
            dices.append(dice(pred, sample["mask"]))
            p, r = precision_recall(pred, sample["mask"])
            precisions.append(p)
            recalls.append(r)
    return {
        "dice": float(np.mean(dices)),
        "precision": float(np.mean(precisions)),
        "recall": float(np.mean(recalls)),
    }
