"""Dense float32 tensors with tape-based reverse-mode differentiation.

Only the operations the GAN models need are provided.  Each differentiable
op records a :class:`TapeNode` holding its inputs and a backward rule;
:func:`backward` walks the recorded graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        # backward_fn(grad_out) -> tuple of grads aligned with inputs (None allowed)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, op, inputs, backward_fn):
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.float32(b)
        return _record(a.data + c, "add_scalar", (a,), lambda g: (g,))
    _check_same_shape(a, b, "add")
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.float32(b)
        return _record(a.data - c, "sub_scalar", (a,), lambda g: (g,))
    _check_same_shape(a, b, "sub")
    return _record(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def neg(a):
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.float32(b)
        return _record(a.data * c, "mul_scalar", (a,), lambda g: (g * c,))
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def square(a):
    ad = a.data
    return _record(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return _record(np.abs(ad), "abs", (a,), lambda g: (np.sign(ad).astype(np.float32) * g,))


def mean(a):
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=np.float32).reshape(())
    shape = a.shape
    return _record(out, "mean", (a,), lambda g: (np.full(shape, g / n, dtype=np.float32),))


def sum(a):  # noqa: A001
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=np.float32).reshape(())
    shape = a.shape
    return _record(out, "sum", (a,), lambda g: (np.full(shape, g, dtype=np.float32),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, "concat", tuple(tensors), bw)


# ---------------------------------------------------------------- activations


def relu(x):
    mask = x.data > 0
    return _record(np.where(mask, x.data, np.float32(0)), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    s = np.float32(slope)
    mask = x.data > 0
    out = np.where(mask, x.data, x.data * s)
    return _record(out, "leaky_relu", (x,), lambda g: (np.where(mask, g, g * s),))


def tanh(x):
    y = np.tanh(x.data)
    return _record(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = _sigmoid(x.data)
    return _record(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_ACTIVATIONS = {"relu": relu, "leaky_relu": leaky_relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------- losses


def bce_with_logits(logits, target):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a constant label."""
    z = logits.data.astype(np.float64)
    t = float(target)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.asarray(loss.mean(), dtype=np.float32).reshape(())
    sig = _sigmoid(logits.data)

    def bw(g):
        return ((sig - np.float32(t)) * (g / n),)

    return _record(out, "bce_with_logits", (logits,), bw)


def l1_loss(a, b):
    return mean(abs(sub(a, b)))


def mse_loss(a, b):
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------- convolution


def _conv_out(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (B, Cin, H, W) with ``weight`` (Cout, Cin, kH, kW)."""
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: bad stride/padding {stride}/{padding}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ContractError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractError(f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
    ho = _conv_out(x.shape[2], weight.shape[2], stride, padding)
    wo = _conv_out(x.shape[3], weight.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise ContractError(f"conv2d: input {x.shape} with weight {weight.shape} gives empty output")
    out = kernels.conv2d_forward(x.data, weight.data, None if bias is None else bias.data, stride, padding)
    xd, wd = x.data, weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = kernels.conv2d_grad_input(g, wd, xd.shape, stride, padding) if x.requires_grad else None
        gw = kernels.conv2d_grad_weight(xd, g, wd.shape, stride, padding) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3), dtype=np.float32) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out, "conv2d", inputs, bw)


def transposed_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Gradient-of-conv2d upsampling; ``weight`` is (Cin, Cout, kH, kW)."""
    if stride < 1 or padding < 0:
        raise ContractError(f"transposed_conv2d: bad stride/padding {stride}/{padding}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ContractError(f"transposed_conv2d: input {x.shape} incompatible with weight {weight.shape}")
    cin, cout, kh, kw = weight.shape
    ho = (x.shape[2] - 1) * stride - 2 * padding + kh
    wo = (x.shape[3] - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ContractError(f"transposed_conv2d: input {x.shape} with weight {weight.shape} gives empty output")
    if bias is not None and bias.shape != (cout,):
        raise ContractError(f"transposed_conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
    out_shape = (x.shape[0], cout, ho, wo)
    # transposed conv of x is the input-gradient of a conv taking out_shape -> x.shape
    out = kernels.conv2d_grad_input(x.data, weight.data, out_shape, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    xd, wd = x.data, weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = kernels.conv2d_forward(g, wd, None, stride, padding) if x.requires_grad else None
        gw = kernels.conv2d_grad_weight(g, xd, wd.shape, stride, padding) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3), dtype=np.float32) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out, "transposed_conv2d", inputs, bw)


# ---------------------------------------------------------------- normalisation


def instance_norm(x, gain, shift, eps=1e-5):
    """Per-(sample, channel) spatial normalisation followed by a channel affine."""
    C = x.shape[1]
    if gain.shape != (C,) or shift.shape != (C,):
        raise ContractError(f"instance_norm: gain {gain.shape}/shift {shift.shape} vs {C} channels")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(np.float32)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(np.float32)
    inv = (1.0 / np.sqrt(var + np.float32(eps))).astype(np.float32)
    xhat = xc * inv
    gd = gain.data.reshape(1, C, 1, 1)
    out = xhat * gd + shift.data.reshape(1, C, 1, 1)

    def bw(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float32) if gain.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3), dtype=np.float32) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gd
            m1 = gxh.mean(axis=(2, 3), keepdims=True)
            m2 = (gxh * xhat).mean(axis=(2, 3), keepdims=True)
            gx = (inv * (gxh - m1 - xhat * m2)).astype(np.float32)
        return gx, ggain, gshift

    return _record(out, "instance_norm", (x, gain, shift), bw)


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.  The tape is
    consumed: interior nodes are released after the pass.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() on a tensor that does not require grad")
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if t.node is None:
            if g is not None:
                g = np.asarray(g, dtype=np.float32).reshape(t.shape)
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if g is None:
            t.node = None
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
        t.node = None

