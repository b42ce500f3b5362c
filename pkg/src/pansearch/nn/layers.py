"""Stateful layers over the functional kernels.

A layer keeps the cache of its latest ``forward`` and adds into its
parameters' ``grad`` on ``backward``.
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from .params import Parameter, glorot_uniform, he_uniform


class Layer:
    def parameters(self) -> dict[str, Parameter]:
        return {}


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, k, rng, dtype=np.float32, zero=False):
        shape = (out_ch, in_ch, k, k)
        if zero:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = he_uniform(rng, shape, in_ch * k * k, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self._cache = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        out, self._cache = F.conv2d_forward(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = F.conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class DeformConv2d(Layer):
    """Deformable conv whose offsets come from a zero-initialised companion conv."""

    def __init__(self, in_ch, out_ch, k, rng, dtype=np.float32):
        self.offset = Conv2d(in_ch, 2 * k * k, k, rng, dtype, zero=True)
        self.weight = Parameter(he_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self._cache = None

    def parameters(self):
        params = {"weight": self.weight, "bias": self.bias}
        params.update({f"offset.{k}": p for k, p in self.offset.parameters().items()})
        return params

    def forward(self, x):
        offsets = self.offset.forward(x)
        out, self._cache = F.deform_conv2d_forward(x, self.weight.value, self.bias.value, offsets)
        return out

    def backward(self, dout):
        dx, dw, db, doff = F.deform_conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx + self.offset.backward(doff)


class ConvTranspose2x2(Layer):
    def __init__(self, in_ch, out_ch, rng, dtype=np.float32):
        # stride 2 with a 2x2 kernel: every output pixel sees each input channel once
        self.weight = Parameter(he_uniform(rng, (in_ch, out_ch, 2, 2), in_ch, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self._cache = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        out, self._cache = F.transposed_conv2d_forward(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = F.transposed_conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Dense(Layer):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, zero=False):
        if zero:
            w = np.zeros((n_out, n_in), dtype=dtype)
        else:
            w = glorot_uniform(rng, (n_out, n_in), n_in, n_out, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out, dtype=dtype))
        self._cache = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        out, self._cache = F.dense_forward(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = F.dense_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


def collect_parameters(named_layers) -> dict[str, Parameter]:
    """Flatten ``[(prefix, layer), ...]`` into ``{"prefix.name": Parameter}``."""
    out = {}
    for prefix, layer in named_layers:
        for name, p in layer.parameters().items():
            out[f"{prefix}.{name}"] = p
    return out
