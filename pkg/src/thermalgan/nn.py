"""Layer containers over the tensor ops."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Owns named parameters and child modules, in registration order."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0, bias=True, init_std=0.02):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = self.add_param("weight", rng.normal(0.0, init_std, (cout, cin, kernel, kernel)))
        self.bias = self.add_param("bias", np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0, bias=True, init_std=0.02):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = self.add_param("weight", rng.normal(0.0, init_std, (cin, cout, kernel, kernel)))
        self.bias = self.add_param("bias", np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.transposed_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm2d(Module):
    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param("gain", np.ones(channels))
        self.shift = self.add_param("shift", np.zeros(channels))

    def forward(self, x):
        return T.instance_norm(x, self.gain, self.shift, self.eps)
