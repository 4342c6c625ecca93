"""Parameter containers shared by the attention kernels and network blocks.

Parameters live in plain dataclasses whose fields are tensors, nested
dataclasses or lists of them. :func:`named_tensors` walks such a tree and
yields dotted names in field order, which is also the checkpoint order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal samples redrawn until they fall inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return Tensor((out * std).astype(dtype), requires_grad=True)


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


@dataclass
class Linear:
    w: Tensor
    b: Tensor | None = None

    @classmethod
    def init(cls, rng, d_in, d_out, dtype=np.float32, bias=True, conv_like=False):
        """Truncated normal weights, or He-uniform when ``conv_like``.

        ``conv_like`` suits projections that act per pixel or per patch on the
        image grid, where a convolution would normally sit.
        """
        w = he_uniform(rng, (d_in, d_out), d_in, dtype) if conv_like else trunc_normal(rng, (d_in, d_out), dtype=dtype)
        return cls(w, zeros((d_out,), dtype) if bias else None)

    def __call__(self, x):
        return T.linear(x, self.w, self.b)

    @property
    def d_in(self):
        return self.w.shape[0]

    @property
    def d_out(self):
        return self.w.shape[1]


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, dim, dtype=np.float32):
        return cls(ones((dim,), dtype), zeros((dim,), dtype))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


@dataclass
class Conv:
    """A convolution kernel ``kh x kw x Cin x Cout`` and its bias."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, k, c_in, c_out, dtype=np.float32):
        return cls(he_uniform(rng, (k, k, c_in, c_out), k * k * c_in, dtype), zeros((c_out,), dtype))

    @property
    def c_out(self):
        return self.w.shape[3]


def named_tensors(obj, prefix=""):
    """Yield ``(dotted_name, tensor)`` for every tensor in a parameter tree."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is not None:
                yield from named_tensors(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_tensors(value, f"{prefix}.{i}" if prefix else str(i))
