"""Adam with bias correction."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place.

    ``params`` and ``grads`` are name -> array mappings; a missing or None
    gradient counts as zero.
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    step = state.lr / c1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= np.float32(b1)
        m += np.float32(1.0 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1.0 - b2) * (g * g)
        denom = np.sqrt(v / np.float32(c2)) + np.float32(state.eps)
        p -= (np.float32(step) * m / denom).astype(np.float32)
    return params, state


class Adam:
    """Adam over the named parameters of a module."""

    def __init__(self, named_params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        data = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items()}
        adam_step(data, grads, self.state)
