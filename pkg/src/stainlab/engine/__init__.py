"""Minimal numpy-backed tensor engine with reverse-mode autodiff.

The engine is deliberately small: dense float32 tensors, an explicit
gradient tape, the handful of layers the segmentation model needs, an
AdamW optimizer, finite-difference gradient checking and a raw-blob
checkpoint format.  No GPU, no fusion, no graph rewriting.
"""

from .tensor import (
    Tape,
    Tensor,
    add,
    adaptive_avg_pool2d,
    adaptive_max_pool2d,
    bce_with_logits,
    concat,
    conv2d,
    custom_op,
    dropout,
    exp,
    log,
    matmul,
    maxpool2d,
    mean,
    mul,
    power,
    relu,
    reshape,
    sigmoid,
    sqrt,
    sub,
    tensor_sum,
    transpose,
    upsample_nearest2x,
)
from .nn import (
    BatchNorm1d,
    BatchNorm2d,
    Conv2d,
    Dense,
    Dropout,
    Layer,
    Sequential,
    kaiming_uniform,
)
from .optim import AdamW
from .gradcheck import grad_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "adaptive_avg_pool2d",
    "adaptive_max_pool2d",
    "bce_with_logits",
    "concat",
    "conv2d",
    "custom_op",
    "dropout",
    "exp",
    "log",
    "matmul",
    "maxpool2d",
    "mean",
    "mul",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "sqrt",
    "sub",
    "tensor_sum",
    "transpose",
    "upsample_nearest2x",
    "BatchNorm1d",
    "BatchNorm2d",
    "Conv2d",
    "Dense",
    "Dropout",
    "Layer",
    "Sequential",
    "kaiming_uniform",
    "AdamW",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
]
