"""Tensor type, gradient tape and the differentiable op set.

Every op is a plain function taking and returning :class:`Tensor`.
When a :class:`Tape` is active and at least one input requires
gradients, the op appends a node (inputs, output, backward rule) to the
tape.  ``Tape.backward`` replays the node list in reverse, visiting
each node exactly once and accumulating gradients into ``.grad``
buffers.

Arithmetic stays in the dtype of the operands (float32 in normal use;
the gradient checker builds float64 models to keep finite differences
meaningful).
"""

import threading

import numpy as np

from ..errors import NonFiniteValue, ShapeMismatch

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape():
    """Innermost active tape, or None outside any ``with Tape():`` block."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-d array with an optional gradient buffer.

    ``grad`` stays None until a backward pass deposits into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} shape={tuple(self.shape)} dtype={self.data.dtype.name} requires_grad={self.requires_grad}>"

    # operator sugar; constants are wrapped as non-differentiable tensors
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _coerce(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of ops for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar loss.  ``clear`` drops every node so
    repeated steps do not grow memory.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, node):
        self._nodes.append(node)

    def backward(self, root, seed=None):
        """Reverse replay from ``root``, accumulating into ``.grad``.

        ``seed`` defaults to ones, so a scalar loss needs no argument.
        """
        if seed is None:
            seed = np.ones_like(root.data)
        root.accumulate_grad(np.asarray(seed, dtype=root.data.dtype))
        for node in reversed(self._nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            grads = node.backward(out_grad)
            for parent, g in zip(node.inputs, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.accumulate_grad(g)

    def clear(self):
        self._nodes = []


def _result(inputs, out_data, backward, name=None):
    """Build the output tensor and record the node if a tape is live."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, name=name)
    if track:
        tape._record(_Node(tuple(inputs), out, backward))
    return out


def custom_op(inputs, out_data, backward, name=None):
    """Record an op with a caller-supplied backward rule.

    ``backward(grad_out) -> tuple`` must return one gradient (or None)
    per input, aligned by position.  This is the hook for ops that are
    not worth a dedicated primitive, e.g. sign flips on the gradient
    path.
    """
    return _result(list(inputs), out_data, backward, name=name)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result([a, b], a.data + b.data, backward, name="add")


def sub(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result([a, b], a.data - b.data, backward, name="sub")


def mul(a, b):
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result([a, b], ad * bd, backward, name="mul")


def div(a, b):
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _result([a, b], out, backward, name="div")


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result([a], out, backward, name="exp")


def log(a):
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _result([a], np.log(ad), backward, name="log")


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        return (g / (2.0 * out),)

    return _result([a], out, backward, name="sqrt")


def power(a, p):
    """Elementwise a**p for a python-float exponent."""
    ad = a.data
    out = ad ** p

    def backward(g):
        return (g * p * ad ** (p - 1.0),)

    return _result([a], out, backward, name="power")


def relu(a):
    ad = a.data
    mask = ad > 0

    def backward(g):
        return (g * mask,)

    return _result([a], np.where(mask, ad, 0.0), backward, name="relu")


def sigmoid(a):
    x = a.data
    # exp(-|x|) keeps the intermediate bounded for large |x|
    t = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t)).astype(x.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result([a], out, backward, name="sigmoid")


# ---------------------------------------------------------------------------
# shape and reduction ops


def reshape(a, shape):
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _result([a], a.data.reshape(shape), backward, name="reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result([a], a.data.transpose(axes), backward, name="transpose")


def _restore_axes(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(in_shape) for ax in axes)
    if not keepdims:
        shape = list(g.shape)
        for ax in sorted(axes):
            shape.insert(ax, 1)
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def tensor_sum(a, axis=None, keepdims=False):
    in_shape = a.shape

    def backward(g):
        return (np.ascontiguousarray(_restore_axes(g, in_shape, axis, keepdims)),)

    return _result([a], a.data.sum(axis=axis, keepdims=keepdims), backward, name="sum")


def mean(a, axis=None, keepdims=False):
    in_shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= in_shape[ax % len(in_shape)]

    def backward(g):
        return (np.ascontiguousarray(_restore_axes(g, in_shape, axis, keepdims)) / count,)

    return _result([a], a.data.mean(axis=axis, keepdims=keepdims), backward, name="mean")


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(list(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward, name="concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim not in (2, 3):
        raise ShapeMismatch(f"matmul expects matching 2-d or 3-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
        raise ShapeMismatch(f"matmul shapes do not align: {ad.shape} @ {bd.shape}")

    def backward(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _result([a, b], ad @ bd, backward, name="matmul")


# ---------------------------------------------------------------------------
# spatial ops (NCHW layout throughout)


def _im2col(xp, kh, kw, stride):
    """Padded input -> (N*Ho*Wo, C*kh*kw) patch matrix."""
    n, c, hp, wp = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation over NCHW input with an OIHW kernel."""
    xd = x.data
    wd = weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and kernel, got {xd.shape}, {wd.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = wd.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if stride < 1:
        raise ShapeMismatch("stride must be >= 1")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = wd.reshape(co, ci * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        gw = (gmat.T @ cols).reshape(wd.shape)
        gb = gmat.sum(axis=0) if bias is not None else None
        gcols = gmat @ wmat
        gcols = gcols.reshape(n, ho, wo, ci, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return _result(inputs, out, backward, name="conv2d")


def maxpool2d(x, window=2, stride=None):
    """Windowed max; ties send the gradient to the first index in row-major order."""
    if stride is None:
        stride = window
    xd = x.data
    n, c, h, w = xd.shape
    win = np.lib.stride_tricks.sliding_window_view(xd, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(xd)
        for p in range(window * window):
            i, j = divmod(p, window)
            contrib = np.where(idx == p, g, 0.0)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        return (gx,)

    return _result([x], np.ascontiguousarray(out), backward, name="maxpool2d")


def _adaptive_bounds(in_size, out_size):
    starts = (np.arange(out_size) * in_size) // out_size
    ends = -((-(np.arange(out_size) + 1) * in_size) // out_size)
    return starts, ends


def adaptive_avg_pool2d(x, out_hw):
    """Average pool to a fixed output size with floor/ceil window bounds."""
    xd = x.data
    n, c, h, w = xd.shape
    oh, ow = (out_hw, out_hw) if isinstance(out_hw, int) else out_hw
    hs, he = _adaptive_bounds(h, oh)
    ws, we = _adaptive_bounds(w, ow)
    out = np.empty((n, c, oh, ow), dtype=xd.dtype)
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = xd[:, :, hs[i] : he[i], ws[j] : we[j]].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(xd)
        for i in range(oh):
            for j in range(ow):
                count = (he[i] - hs[i]) * (we[j] - ws[j])
                gx[:, :, hs[i] : he[i], ws[j] : we[j]] += g[:, :, i, j, None, None] / count
        return (gx,)

    return _result([x], out, backward, name="adaptive_avg_pool2d")


def adaptive_max_pool2d(x, out_hw):
    xd = x.data
    n, c, h, w = xd.shape
    oh, ow = (out_hw, out_hw) if isinstance(out_hw, int) else out_hw
    hs, he = _adaptive_bounds(h, oh)
    ws, we = _adaptive_bounds(w, ow)
    out = np.empty((n, c, oh, ow), dtype=xd.dtype)
    argmaxes = {}
    for i in range(oh):
        for j in range(ow):
            block = xd[:, :, hs[i] : he[i], ws[j] : we[j]].reshape(n, c, -1)
            idx = block.argmax(axis=-1)
            argmaxes[i, j] = idx
            out[:, :, i, j] = np.take_along_axis(block, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(xd)
        ni, ci = np.mgrid[0:n, 0:c]
        for i in range(oh):
            for j in range(ow):
                bw = we[j] - ws[j]
                idx = argmaxes[i, j]
                rows = hs[i] + idx // bw
                cols = ws[j] + idx % bw
                np.add.at(gx, (ni, ci, rows, cols), g[:, :, i, j])
        return (gx,)

    return _result([x], out, backward, name="adaptive_max_pool2d")


def upsample_nearest2x(x):
    xd = x.data
    n, c, h, w = xd.shape
    out = xd.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result([x], out, backward, name="upsample_nearest2x")


# ---------------------------------------------------------------------------
# stochastic and loss ops


def dropout(x, p, training, rng):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ShapeMismatch(f"dropout rate must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)

    def backward(g):
        return (g * keep * scale,)

    return _result([x], x.data * keep * scale, backward, name="dropout")


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on raw logits.

    Uses max(x,0) - x*z + log1p(exp(-|x|)) so large logits cannot
    overflow, and a closed-form backward (sigmoid(x) - z) / n.
    """
    x = logits.data
    z = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=x.dtype)
    if x.shape != z.shape:
        raise ShapeMismatch(f"logits {x.shape} vs targets {z.shape}")
    per = np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))
    out = per.mean(dtype=x.dtype)
    n = x.size

    def backward(g):
        t = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
        return (g * (s - z) / n,)

    return _result([logits], np.asarray(out, dtype=x.dtype), backward, name="bce_with_logits")


def assert_finite(arr, what):
    """Raise NonFiniteValue if ``arr`` contains NaN or Inf."""
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"{what} contains NaN or Inf")
