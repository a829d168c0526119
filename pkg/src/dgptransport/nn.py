"""Parameter containers, a SiLU multilayer perceptron and the Adam optimiser."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class Module:
    """Base class that discovers trainable tensors by walking attributes.

    Attributes are visited in sorted name order so parameter lists (and
    therefore optimiser state and checkpoints) are deterministic.
    """

    def named_parameters(self, prefix=""):
        for key in sorted(vars(self)):
            val = getattr(self, key)
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise dc.DimensionError(f"{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, d_in, d_out, rng, zero=False):
        scale = 0.0 if zero else 1.0 / np.sqrt(d_in)
        self.W = Tensor(rng.normal(0.0, 1.0, (d_in, d_out)) * scale, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return x @ self.W + self.b


class MLP(Module):
    """SiLU network; the last layer can start at exactly zero."""

    def __init__(self, d_in, d_out, rng, hidden=128, depth=2, zero_last=True):
        sizes = [d_in] + [hidden] * depth
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.layers.append(Linear(sizes[-1], d_out, rng, zero=zero_last))

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = dc.silu(layer(x))
        return self.layers[-1](x)

    def jvp(self, x, dx):
        """Return ``(f(x), J_f(x) dx)``; both stay differentiable."""
        for layer in self.layers[:-1]:
            h = layer(x)
            dh = dx @ layer.W
            x, dx = dc.silu(h), dc.dsilu(h) * dh
        last = self.layers[-1]
        return last(x), dx @ last.W


class Adam:
    def __init__(self, params, lr=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads=None):
        if grads is None:
            grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
