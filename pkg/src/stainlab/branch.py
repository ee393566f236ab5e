"""Gradient reversal and the stain-matrix regression branch.

The branch turns intermediate encoder features into a 3x2 stain-matrix
prediction.  Because a gradient reversal layer sits between the
features and the regression head, the encoder is pushed to make that
prediction HARDER while the head itself still learns to predict: the
shared features drift toward stain invariance.
"""

from dataclasses import dataclass

import numpy as np

from .engine import tensor as T
from .engine.nn import BatchNorm1d, Conv2d, Dense, Dropout, Layer, _prefixed
from .engine.tensor import Tensor
from .errors import ConfigInvalid, ShapeMismatch

DOWNSAMPLE_MODES = ("MAX", "AVG", "SCONV")


@dataclass
class GrlConfig:
    strength: float = 1.0
    warmup_steps: int = 0  # 0 disables the ramp

    def validate(self):
        if self.strength < 0:
            raise ConfigInvalid(f"grl.strength must be >= 0, got {self.strength}")
        if self.warmup_steps < 0:
            raise ConfigInvalid(f"grl.warmup_steps must be >= 0, got {self.warmup_steps}")
        return self


@dataclass
class BranchConfig:
    downsample_mode: str = "MAX"
    target_spatial: int = 8
    embed_dim: int = 128
    dropout_p: float = 0.5

    def validate(self):
        if self.downsample_mode not in DOWNSAMPLE_MODES:
            raise ConfigInvalid(
                f"branch.downsample_mode must be one of {DOWNSAMPLE_MODES}, got {self.downsample_mode!r}"
            )
        if self.target_spatial < 1:
            raise ConfigInvalid(f"branch.target_spatial must be >= 1, got {self.target_spatial}")
        if self.embed_dim < 1:
            raise ConfigInvalid(f"branch.embed_dim must be >= 1, got {self.embed_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigInvalid(f"branch.dropout_p must lie in [0, 1), got {self.dropout_p}")
        return self


def grl(x, strength=1.0):
    """Identity forward; backward multiplies the gradient by -strength."""
    lam = float(strength)

    def backward(g):
        return (-lam * g,)

    return T.custom_op([x], x.data, backward, name="grl")


def effective_strength(cfg, step):
    """GRL strength at a given optimizer step, honoring optional warm-up."""
    if cfg.warmup_steps <= 0:
        return cfg.strength
    return cfg.strength * min(1.0, (step + 1) / cfg.warmup_steps)


class StainBranch(Layer):
    """downsample -> GRL -> flatten -> dense -> BN -> relu -> dropout -> dense(6).

    Output is reshaped to [N, 3, 2] to match the stain-matrix layout.
    """

    def __init__(self, in_channels, cfg, grl_cfg, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg.validate()
        self.grl_cfg = grl_cfg.validate()
        self.in_channels = in_channels
        t = cfg.target_spatial
        self.sconv = None
        if cfg.downsample_mode == "SCONV":
            self.sconv = [
                Conv2d(in_channels, in_channels, 3, rng, stride=2, padding=1, dtype=dtype),
                Conv2d(in_channels, in_channels, 3, rng, stride=2, padding=1, dtype=dtype),
            ]
        self.embed = Dense(in_channels * t * t, cfg.embed_dim, rng, dtype=dtype)
        self.norm = BatchNorm1d(cfg.embed_dim, dtype=dtype)
        self.drop = Dropout(cfg.dropout_p, rng)
        self.head = Dense(cfg.embed_dim, 6, rng, dtype=dtype)

    def children(self):
        kids = [self.embed, self.norm, self.drop, self.head]
        if self.sconv is not None:
            kids.extend(self.sconv)
        return kids

    def parameters(self):
        out = {}
        out.update(_prefixed("embed", self.embed.parameters()))
        out.update(_prefixed("norm", self.norm.parameters()))
        out.update(_prefixed("head", self.head.parameters()))
        if self.sconv is not None:
            out.update(_prefixed("sconv0", self.sconv[0].parameters()))
            out.update(_prefixed("sconv1", self.sconv[1].parameters()))
        return out

    def buffers(self):
        return _prefixed("norm", self.norm.buffers())

    def load_buffers(self, mapping):
        self.norm.load_buffers({k[len("norm.") :]: v for k, v in mapping.items() if k.startswith("norm.")})

    def _downsample(self, x):
        t = self.cfg.target_spatial
        if x.shape[2] < t or x.shape[3] < t:
            raise ShapeMismatch(
                f"branch input spatial {x.shape[2]}x{x.shape[3]} below target {t}"
            )
        if self.cfg.downsample_mode == "MAX":
            return T.adaptive_max_pool2d(x, t)
        if self.cfg.downsample_mode == "AVG":
            return T.adaptive_avg_pool2d(x, t)
        h = x
        for conv in self.sconv:
            h = T.relu(conv(h))
        # strided convs rarely land exactly on target; trim with an exact pool
        if h.shape[2] != t or h.shape[3] != t:
            h = T.adaptive_avg_pool2d(h, t)
        return h

    def forward(self, features, strength=None):
        if features.ndim != 4 or features.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"branch expects [N,{self.in_channels},H,W], got {tuple(features.shape)}"
            )
        lam = self.grl_cfg.strength if strength is None else strength
        n = features.shape[0]
        h = self._downsample(features)
        h = grl(h, lam)
        h = T.reshape(h, (n, -1))
        h = self.embed(h)
        h = self.norm(h)
        h = T.relu(h)
        h = self.drop(h)
        h = self.head(h)
        return T.reshape(h, (n, 3, 2))


def rmse_stain_loss(pred, target):
    """Single square root of the mean squared element difference.

    The mean runs over every element of the batch (N x 3 x 2 values),
    so the loss is one scalar radical, not a per-sample average of
    norms.
    """
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.data.dtype))
    if pred.shape != target.shape:
        raise ShapeMismatch(f"stain prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    diff = T.sub(pred, target)
    return T.sqrt(T.mean(T.mul(diff, diff)))


def total_loss(task_loss, stain_loss, alpha):
    """task + alpha * stain, the combined training objective."""
    return T.add(task_loss, T.mul(stain_loss, Tensor(np.asarray(alpha, dtype=task_loss.data.dtype))))
