"""Parameter-holding layers built on the Tensor ops.

Each layer registers its tensors under dotted names so models can expose a
flat name -> Tensor mapping for the optimizer and checkpointing.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def fan_in_uniform(rng, shape, fan_in, dtype=None):
    """Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    arr = rng.uniform(-bound, bound, size=shape)
    return arr.astype(dtype or T.default_dtype())


class Module:
    """Minimal container: children + named parameters, nothing else."""

    def named_params(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, T.Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_params(name))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{name}.{i}"))
        return out


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        self.weight = T.Tensor(
            fan_in_uniform(rng, (in_features, out_features), in_features), requires_grad=True
        )
        self.bias = (
            T.Tensor(np.zeros(out_features, dtype=T.default_dtype()), requires_grad=True)
            if bias
            else None
        )

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, dilation=1):
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        fan_in = in_channels * kernel_size
        self.weight = T.Tensor(
            fan_in_uniform(rng, (out_channels, in_channels, kernel_size), fan_in),
            requires_grad=True,
        )
        self.bias = T.Tensor(np.zeros(out_channels, dtype=T.default_dtype()), requires_grad=True)

    def __call__(self, x):
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.gamma = T.Tensor(np.ones(dim, dtype=T.default_dtype()), requires_grad=True)
        self.beta = T.Tensor(np.zeros(dim, dtype=T.default_dtype()), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num_rows, dim, rng):
        self.table = T.Tensor(fan_in_uniform(rng, (num_rows, dim), dim), requires_grad=True)

    def __call__(self, indices):
        return T.embedding_lookup(self.table, indices)


def load_params(params, arrays, strict=True):
    """Copy checkpoint arrays into live parameter tensors by name."""
    missing = [n for n in params if n not in arrays]
    if strict and missing:
        raise KeyError(f"checkpoint missing parameters: {missing[:5]}")
    for name, tensor in params.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise T.ShapeError(
                f"parameter {name}: checkpoint shape {arr.shape} != model shape {tensor.data.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
