"""Encoder-decoder segmentation network with optional stain branch.

Three variants share one skeleton:

- BASELINE: plain U-Net shaped encoder/decoder, task loss only.
- STINV: stage-k encoder features feed the gradient-reversal stain
  branch, loss = task + alpha * stain RMSE.
- STINV_CA: a second (siamese) encoder pass on a stain-augmented copy
  of the batch supplies the covariance pair for channel attention; the
  branch sees the reweighed copy of the stage-k features while the
  segmentation path keeps the originals.
"""

from dataclasses import dataclass, field

import numpy as np

from . import attention
from .branch import BranchConfig, GrlConfig, StainBranch, rmse_stain_loss, total_loss
from .engine import tensor as T
from .engine.nn import BatchNorm2d, Conv2d, Layer, _prefixed
from .engine.tensor import Tensor
from .errors import ConfigInvalid, MissingAugmentation, MissingStainTarget, ShapeMismatch

VARIANTS = ("BASELINE", "STINV", "STINV_CA")


@dataclass
class ModelConfig:
    variant: str = "BASELINE"
    attach_stage: int = 1
    encoder_channels: list = field(default_factory=lambda: [16, 32, 64, 128, 256])
    input_size: int = 96
    branch: BranchConfig = field(default_factory=BranchConfig)
    grl: GrlConfig = field(default_factory=GrlConfig)
    centered_covariance: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        depth = len(self.encoder_channels)
        if depth < 1:
            raise ConfigInvalid("model.encoder_channels must be non-empty")
        if any(b <= a for a, b in zip(self.encoder_channels, self.encoder_channels[1:])):
            raise ConfigInvalid(f"model.encoder_channels must increase strictly, got {self.encoder_channels}")
        if not 1 <= self.attach_stage <= depth:
            raise ConfigInvalid(f"model.attach_stage must lie in 1..{depth}, got {self.attach_stage}")
        divisor = 2 ** depth
        if self.input_size < 16 or self.input_size % divisor:
            raise ConfigInvalid(
                f"model.input_size must be >= 16 and divisible by {divisor}, got {self.input_size}"
            )
        self.branch.validate()
        self.grl.validate()
        return self


@dataclass
class ForwardOutputs:
    logits: Tensor
    stage_features: list
    s_hat: Tensor = None
    attention_weights: Tensor = None


def images_to_tensor(images, dtype=np.float32):
    """uint8 NHWC batch -> [N,3,H,W] float tensor scaled to [0,1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatch(f"expected NHWC rgb batch, got {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=dtype) / 255.0)


def masks_to_tensor(masks, dtype=np.float32):
    """Binary NHW batch -> [N,1,H,W] float tensor of 0/1."""
    arr = np.asarray(masks)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor((arr[:, None, :, :] > 0).astype(dtype))


class ConvBlock(Layer):
    """3x3 same-padding conv, batch norm, relu."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, stride=1, padding=1, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def children(self):
        return [self.conv, self.bn]

    def parameters(self):
        out = _prefixed("conv", self.conv.parameters())
        out.update(_prefixed("bn", self.bn.parameters()))
        return out

    def buffers(self):
        return _prefixed("bn", self.bn.buffers())

    def load_buffers(self, mapping):
        self.bn.load_buffers({k[3:]: v for k, v in mapping.items() if k.startswith("bn.")})

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class _Stage(Layer):
    def __init__(self, cin, cout, rng, dtype):
        super().__init__()
        self.block1 = ConvBlock(cin, cout, rng, dtype)
        self.block2 = ConvBlock(cout, cout, rng, dtype)

    def children(self):
        return [self.block1, self.block2]

    def parameters(self):
        out = _prefixed("block1", self.block1.parameters())
        out.update(_prefixed("block2", self.block2.parameters()))
        return out

    def buffers(self):
        out = _prefixed("block1", self.block1.buffers())
        out.update(_prefixed("block2", self.block2.buffers()))
        return out

    def load_buffers(self, mapping):
        for name, block in (("block1", self.block1), ("block2", self.block2)):
            block.load_buffers({k[len(name) + 1 :]: v for k, v in mapping.items() if k.startswith(name + ".")})

    def forward(self, x):
        return self.block2(self.block1(x))


class _DecoderStage(Layer):
    """Upsample, reduce channels, concat the skip, refine."""

    def __init__(self, cin, cskip, rng, dtype):
        super().__init__()
        self.reduce = Conv2d(cin, cskip, 3, rng, stride=1, padding=1, dtype=dtype)
        self.block1 = ConvBlock(2 * cskip, cskip, rng, dtype)
        self.block2 = ConvBlock(cskip, cskip, rng, dtype)

    def children(self):
        return [self.reduce, self.block1, self.block2]

    def parameters(self):
        out = _prefixed("reduce", self.reduce.parameters())
        out.update(_prefixed("block1", self.block1.parameters()))
        out.update(_prefixed("block2", self.block2.parameters()))
        return out

    def buffers(self):
        out = _prefixed("block1", self.block1.buffers())
        out.update(_prefixed("block2", self.block2.buffers()))
        return out

    def load_buffers(self, mapping):
        for name, block in (("block1", self.block1), ("block2", self.block2)):
            block.load_buffers({k[len(name) + 1 :]: v for k, v in mapping.items() if k.startswith(name + ".")})

    def forward(self, x, skip):
        x = T.upsample_nearest2x(x)
        x = self.reduce(x)
        x = T.concat([x, skip], axis=1)
        return self.block2(self.block1(x))


class SegModel(Layer):
    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg.validate()
        chans = list(cfg.encoder_channels)
        self.stages = []
        cin = 3
        for cout in chans:
            self.stages.append(_Stage(cin, cout, rng, dtype))
            cin = cout
        self.decoder = []
        cin = chans[-1]
        for cskip in reversed(chans):
            self.decoder.append(_DecoderStage(cin, cskip, rng, dtype))
            cin = cskip
        self.head = Conv2d(chans[0], 1, 1, rng, stride=1, padding=0, dtype=dtype)

        self.branch = None
        self.attn = None
        if cfg.variant != "BASELINE":
            stage_c = chans[cfg.attach_stage - 1]
            stage_hw = cfg.input_size // (2 ** (cfg.attach_stage - 1))
            branch_cfg = BranchConfig(
                downsample_mode=cfg.branch.downsample_mode,
                # deep stages can be smaller than the requested pool output
                target_spatial=min(cfg.branch.target_spatial, stage_hw),
                embed_dim=cfg.branch.embed_dim,
                dropout_p=cfg.branch.dropout_p,
            )
            self.branch = StainBranch(stage_c, branch_cfg, cfg.grl, rng, dtype=dtype)
        if cfg.variant == "STINV_CA":
            stage_c = chans[cfg.attach_stage - 1]
            self.attn = attention.AttentionHead(stage_c, rng, dtype=dtype)

    def children(self):
        kids = list(self.stages) + list(self.decoder) + [self.head]
        if self.branch is not None:
            kids.append(self.branch)
        if self.attn is not None:
            kids.append(self.attn)
        return kids

    def parameters(self):
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            out.update(_prefixed(f"enc{i}", stage.parameters()))
        for i, stage in enumerate(self.decoder, start=1):
            out.update(_prefixed(f"dec{i}", stage.parameters()))
        out.update(_prefixed("head", self.head.parameters()))
        if self.branch is not None:
            out.update(_prefixed("branch", self.branch.parameters()))
        if self.attn is not None:
            out.update(_prefixed("attn", self.attn.parameters()))
        return out

    def buffers(self):
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            out.update(_prefixed(f"enc{i}", stage.buffers()))
        for i, stage in enumerate(self.decoder, start=1):
            out.update(_prefixed(f"dec{i}", stage.buffers()))
        if self.branch is not None:
            out.update(_prefixed("branch", self.branch.buffers()))
        return out

    def load_parameters(self, mapping):
        params = self.parameters()
        missing = set(params) - set(mapping)
        extra = set(mapping) - set(params)
        if missing or extra:
            raise ShapeMismatch(f"parameter names mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, tensor in params.items():
            arr = np.asarray(mapping[name], dtype=tensor.data.dtype)
            if arr.shape != tensor.data.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} vs model {tensor.data.shape}")
            tensor.data[...] = arr

    def load_buffers(self, mapping):
        for i, stage in enumerate(self.stages, start=1):
            stage.load_buffers({k[len(f"enc{i}.") :]: v for k, v in mapping.items() if k.startswith(f"enc{i}.")})
        for i, stage in enumerate(self.decoder, start=1):
            stage.load_buffers({k[len(f"dec{i}.") :]: v for k, v in mapping.items() if k.startswith(f"dec{i}.")})
        if self.branch is not None:
            self.branch.load_buffers({k[7:]: v for k, v in mapping.items() if k.startswith("branch.")})

    def _set_bn_stat_updates(self, flag):
        def visit(layer):
            if isinstance(layer, BatchNorm2d):
                layer.update_stats = flag
            for child in layer.children():
                visit(child)

        for stage in self.stages:
            visit(stage)

    def encode(self, x, to_stage=None):
        """Run encoder stages, returning per-stage post-activation features.

        ``to_stage`` stops early (the augmented pass never needs the
        decoder or deeper stages).  Returns (features list, pooled head).
        """
        depth = to_stage or len(self.stages)
        feats = []
        h = x
        for stage in self.stages[:depth]:
            f = stage(h)
            feats.append(f)
            h = T.maxpool2d(f, 2, 2)
        return feats, h

    def decode(self, bottleneck, feats):
        h = bottleneck
        for stage, skip in zip(self.decoder, reversed(feats)):
            h = stage.forward(h, skip)
        return self.head(h)

    def segment(self, x):
        feats, h = self.encode(x)
        return self.decode(h, feats), feats

    def forward(self, x):
        logits, _ = self.segment(x)
        return logits


def build_model(cfg, rng, dtype=np.float32):
    return SegModel(cfg, rng, dtype=dtype)


def _soft_dice_loss(logits, targets):
    probs = T.sigmoid(logits)
    inter = T.tensor_sum(T.mul(probs, targets))
    total = T.add(T.tensor_sum(probs), T.tensor_sum(targets))
    eps = Tensor(np.asarray(1.0, dtype=logits.data.dtype))
    two = Tensor(np.asarray(2.0, dtype=logits.data.dtype))
    score = T.div(T.add(T.mul(inter, two), eps), T.add(total, eps))
    return T.sub(Tensor(np.asarray(1.0, dtype=logits.data.dtype)), score)


def task_loss_fn(logits, targets, kind="bce"):
    if kind == "bce":
        return T.bce_with_logits(logits, targets)
    if kind == "dice":
        return _soft_dice_loss(logits, targets)
    raise ConfigInvalid(f"task loss must be 'bce' or 'dice', got {kind!r}")


def forward_train(
    model,
    images,
    masks,
    aug_images=None,
    stain_targets=None,
    alpha=0.5,
    grl_strength=None,
    task_loss="bce",
):
    """One training-mode forward pass; returns (ForwardOutputs, losses).

    ``images``/``aug_images`` are uint8 NHWC batches, ``masks`` binary
    NHW, ``stain_targets`` an [N,3,2] array of per-image stain matrices
    estimated from the unaugmented images.
    """
    cfg = model.cfg
    if cfg.variant != "BASELINE" and stain_targets is None:
        raise MissingStainTarget(f"variant {cfg.variant} trains against stain matrices")
    if cfg.variant == "STINV_CA" and aug_images is None:
        raise MissingAugmentation("variant STINV_CA needs stain-augmented images")

    x = images_to_tensor(images, dtype=model.head.weight.data.dtype)
    y = masks_to_tensor(masks, dtype=model.head.weight.data.dtype)
    logits, feats = model.segment(x)
    task = task_loss_fn(logits, y, task_loss)

    outputs = ForwardOutputs(logits=logits, stage_features=feats)
    losses = {"task": task, "stain": None, "total": task}
    if cfg.variant == "BASELINE":
        return outputs, losses

    k = cfg.attach_stage
    branch_in = feats[k - 1]
    if cfg.variant == "STINV_CA":
        xa = images_to_tensor(aug_images, dtype=x.data.dtype)
        # siamese pass: shared weights, but running stats see each batch once
        model._set_bn_stat_updates(False)
        try:
            aug_feats, _ = model.encode(xa, to_stage=k)
        finally:
            model._set_bn_stat_updates(True)
        sigma = attention.covariance(branch_in, centered=cfg.centered_covariance)
        sigma_prime = attention.covariance(aug_feats[k - 1], centered=cfg.centered_covariance)
        variance = attention.variance_matrix(sigma, sigma_prime)
        weights = attention.channel_weights(variance, model.attn)
        outputs.attention_weights = weights
        branch_in = attention.reweigh(branch_in, weights)

    s_hat = model.branch(branch_in, strength=grl_strength)
    outputs.s_hat = s_hat
    stain = rmse_stain_loss(s_hat, Tensor(np.asarray(stain_targets, dtype=x.data.dtype)))
    losses["stain"] = stain
    losses["total"] = total_loss(task, stain, alpha)
    return outputs, losses


def forward_eval(model, images):
    """Deterministic eval-mode logits; no branch, no augmentation."""
    was_training = model.training
    model.set_training(False)
    try:
        x = images_to_tensor(images, dtype=model.head.weight.data.dtype)
        logits, _ = model.segment(x)
    finally:
        model.set_training(was_training)
    return logits
