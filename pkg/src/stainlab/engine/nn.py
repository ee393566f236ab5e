"""Layers on top of the tensor ops.

Layers own their parameter tensors and expose them as flat
``name -> Tensor`` maps so models, optimizers and checkpoints can agree
on names.  Running statistics live in ``buffers()`` and never receive
gradient updates.
"""

import numpy as np

from ..errors import DegenerateBatch, ShapeMismatch
from . import tensor as T
from .tensor import Tensor


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    """Uniform(-b, b) with b = sqrt(6 / fan_in), the relu-gain variant."""
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class: parameter/buffer maps plus a train/eval flag."""

    def __init__(self):
        self.training = True

    def parameters(self):
        return {}

    def buffers(self):
        return {}

    def children(self):
        return []

    def set_training(self, flag):
        self.training = bool(flag)
        for child in self.children():
            child.set_training(flag)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _prefixed(prefix, mapping):
    return {f"{prefix}.{k}": v for k, v in mapping.items()}


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        w = kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.weight = Tensor(w, requires_grad=True, name="conv.weight")
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True, name="conv.bias") if bias else None

    def parameters(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Dense(Layer):
    def __init__(self, in_features, out_features, rng, bias=True, dtype=np.float32):
        super().__init__()
        w = kaiming_uniform(rng, (in_features, out_features), in_features, dtype)
        self.weight = Tensor(w, requires_grad=True, name="dense.weight")
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True, name="dense.bias") if bias else None

    def parameters(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeMismatch(f"dense expects [N,{self.weight.shape[0]}], got {tuple(x.shape)}")
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class _BatchNorm(Layer):
    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.update_stats = True
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True, name="bn.gamma")
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True, name="bn.beta")
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, mapping):
        self.running_mean[...] = mapping["running_mean"]
        self.running_var[...] = mapping["running_var"]

    def _normalize(self, x, axes, param_shape):
        count = 1
        for ax in axes:
            count *= x.shape[ax]
        if self.training:
            if count == 1:
                raise DegenerateBatch(f"batch statistics over a single element (shape {tuple(x.shape)})")
            m = T.mean(x, axis=axes, keepdims=True)
            centered = T.sub(x, m)
            v = T.mean(T.mul(centered, centered), axis=axes, keepdims=True)
            if self.update_stats:
                # running stats track the unbiased variance, update detached from the tape
                mom = self.momentum
                self.running_mean[...] = (1 - mom) * self.running_mean + mom * m.data.reshape(-1)
                unbiased = v.data.reshape(-1) * (count / (count - 1))
                self.running_var[...] = (1 - mom) * self.running_var + mom * unbiased
            xhat = T.mul(centered, T.power(v + self.eps, -0.5))
        else:
            rm = Tensor(self.running_mean.reshape(param_shape).astype(x.dtype))
            rs = Tensor((1.0 / np.sqrt(self.running_var + self.eps)).reshape(param_shape).astype(x.dtype))
            xhat = T.mul(T.sub(x, rm), rs)
        g = T.reshape(self.gamma, param_shape)
        b = T.reshape(self.beta, param_shape)
        return T.add(T.mul(xhat, g), b)


class BatchNorm2d(_BatchNorm):
    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.num_features:
            raise ShapeMismatch(f"batchnorm2d expects [N,{self.num_features},H,W], got {tuple(x.shape)}")
        return self._normalize(x, (0, 2, 3), (1, self.num_features, 1, 1))


class BatchNorm1d(_BatchNorm):
    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise ShapeMismatch(f"batchnorm1d expects [N,{self.num_features}], got {tuple(x.shape)}")
        return self._normalize(x, (0,), (1, self.num_features))


class Dropout(Layer):
    def __init__(self, p, rng):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x):
        return T.dropout(x, self.p, self.training, self.rng)


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(_prefixed(str(i), layer.parameters()))
        return out

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(_prefixed(str(i), layer.buffers()))
        return out

    def load_buffers(self, mapping):
        for i, layer in enumerate(self.layers):
            sub = {k[len(str(i)) + 1 :]: v for k, v in mapping.items() if k.startswith(f"{i}.")}
            if sub and hasattr(layer, "load_buffers"):
                layer.load_buffers(sub)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
