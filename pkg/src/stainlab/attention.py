"""Channel attention driven by covariance statistics of paired features.

Given features of an image and of a stain-perturbed copy, the per-pair
covariance matrices are combined into a variance matrix whose rows are
mapped to per-channel sigmoid weights.  Channels whose second-order
statistics move under stain perturbation get weights away from 0.5 and
the downstream consumer can emphasize or suppress them.
"""

import numpy as np

from .engine import tensor as T
from .engine.nn import Layer, kaiming_uniform
from .engine.tensor import Tensor
from .errors import ShapeMismatch


def covariance(features, centered=False):
    """Per-sample second-moment matrix, (1/HW) F F^T with F as C x HW.

    The batch dimension is preserved: [N,C,H,W] -> [N,C,C].  ``centered``
    subtracts the per-channel spatial mean first; off by default, the
    plain Gram form is the primary definition.
    """
    if features.ndim != 4:
        raise ShapeMismatch(f"covariance expects [N,C,H,W], got {tuple(features.shape)}")
    n, c, h, w = features.shape
    hw = h * w
    flat = T.reshape(features, (n, c, hw))
    if centered:
        flat = T.sub(flat, T.mean(flat, axis=2, keepdims=True))
    gram = T.matmul(flat, T.transpose(flat, (0, 2, 1)))
    return T.mul(gram, Tensor(np.asarray(1.0 / hw, dtype=features.data.dtype)))


def variance_matrix(sigma, sigma_prime):
    """Elementwise variance of the two covariances about their mean.

    Computed as 0.5*((S - m)^2 + (S' - m)^2) with m = 0.5*(S + S'),
    which algebraically reduces to 0.25*(S - S')^2.
    """
    if sigma.shape != sigma_prime.shape:
        raise ShapeMismatch(f"covariance shapes differ: {tuple(sigma.shape)} vs {tuple(sigma_prime.shape)}")
    mu = T.mul(T.add(sigma, sigma_prime), Tensor(np.asarray(0.5, dtype=sigma.data.dtype)))
    da = T.sub(sigma, mu)
    db = T.sub(sigma_prime, mu)
    half = Tensor(np.asarray(0.5, dtype=sigma.data.dtype))
    return T.mul(T.add(T.mul(da, da), T.mul(db, db)), half)


class AttentionHead(Layer):
    """Maps each channel's row of the variance matrix to a scalar weight."""

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        self.channels = channels
        w = kaiming_uniform(rng, (channels, 1), channels, dtype)
        self.weight = Tensor(w, requires_grad=True, name="attn.weight")
        self.bias = Tensor(np.zeros(1, dtype=dtype), requires_grad=True, name="attn.bias")

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, variance):
        return channel_weights(variance, self)


def channel_weights(variance, head):
    """sigmoid(V M + b) per sample: [N,C,C] -> [N,C], strictly in (0,1)."""
    if variance.ndim != 3 or variance.shape[1] != variance.shape[2]:
        raise ShapeMismatch(f"variance matrix must be [N,C,C], got {tuple(variance.shape)}")
    n, c, _ = variance.shape
    if c != head.weight.shape[0]:
        raise ShapeMismatch(f"attention head expects C={head.weight.shape[0]}, got C={c}")
    rows = T.reshape(variance, (n * c, c))
    logits = T.add(T.matmul(rows, head.weight), head.bias)
    return T.reshape(T.sigmoid(logits), (n, c))


def reweigh(features, weights):
    """Scale each channel of [N,C,H,W] by its weight in [N,C]."""
    if features.ndim != 4 or weights.ndim != 2 or features.shape[:2] != weights.shape:
        raise ShapeMismatch(
            f"reweigh got features {tuple(features.shape)} and weights {tuple(weights.shape)}"
        )
    n, c = weights.shape
    return T.mul(features, T.reshape(weights, (n, c, 1, 1)))


def export_matrix_csv(matrix, path):
    """Write a 2-d matrix as a plain CSV grid."""
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.8g")


def export_matrix_png(matrix, path):
    """Min-max normalized grayscale heatmap of a 2-d matrix."""
    from PIL import Image

    arr = np.asarray(matrix, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        norm = np.zeros_like(arr)
    else:
        norm = (arr - lo) / (hi - lo)
    img = Image.fromarray(np.clip(np.rint(norm * 255.0), 0, 255).astype(np.uint8), mode="L")
    img.save(path)
