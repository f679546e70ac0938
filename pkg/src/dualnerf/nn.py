"""Small parameterized building blocks on top of the autodiff core."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Anything with named parameters."""

    def params(self):
        """Ordered mapping name -> Tensor of every learnable parameter."""
        out = {}
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[attr] = value
            elif isinstance(value, Module):
                for k, v in value.params().items():
                    out[f"{attr}.{k}"] = v
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for k, v in item.params().items():
                            out[f"{attr}.{i}.{k}"] = v
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{attr}.{i}"] = item
        return out


class Dense(Module):
    """Affine layer x[..., din] -> x[..., dout]."""

    def __init__(self, rng, din, dout, zero_init=False):
        if zero_init:
            w = np.zeros((din, dout))
        else:
            w = rng.standard_normal((din, dout)) / np.sqrt(din)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Dense stack with ReLU between layers (not after the last)."""

    def __init__(self, rng, dims, zero_init_last=False):
        self.layers = [Dense(rng, dims[i], dims[i + 1],
                             zero_init=zero_init_last and i == len(dims) - 2)
                       for i in range(len(dims) - 1)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


def named_params(modules):
    """Flatten {prefix: Module} into one ordered name -> Tensor dict."""
    out = {}
    for prefix, module in modules.items():
        for k, v in module.params().items():
            name = f"{prefix}.{k}"
            v.name = name
            out[name] = v
    return out
