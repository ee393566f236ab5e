"""Finite-difference verification of tape gradients."""

import numpy as np

from ..errors import NonFiniteValue
from .tensor import Tape, Tensor


def grad_check(f, point, eps=None):
    """Max relative error between tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic
    (fix seeds, run normalization layers in eval mode).  ``point`` is
    perturbed coordinate-wise; per-coordinate error is
    |a - n| / max(1, |a|, |n|), which reads as absolute error for small
    gradients and relative error for large ones.
    """
    x = Tensor(np.array(point.data, copy=True), requires_grad=True)
    if eps is None:
        eps = 1e-2 if x.data.dtype == np.float32 else 1e-5

    tape = Tape()
    with tape:
        out = f(x)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued f, got shape {tuple(out.shape)}")
    if not np.isfinite(out.data).all():
        raise NonFiniteValue("f(point) is not finite")
    tape.backward(out)
    analytic = np.array(x.grad, copy=True)
    tape.clear()
    if not np.isfinite(analytic).all():
        raise NonFiniteValue("tape gradient is not finite")

    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(x.data)).item()
        flat[i] = orig - eps
        lo = f(Tensor(x.data)).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * eps)
    if not np.isfinite(numeric).all():
        raise NonFiniteValue("finite-difference gradient is not finite")

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
