"""Self-attention variants used by the transformer segmentation models.

All spatial kernels take channels-last maps, either ``h x w x D`` or batched
``B x h x w x D``. Token kernels take ``... x N x D``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, GeometryError
from .params import Linear, ones, trunc_normal, zeros
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class AttentionParams:
    heads: int
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    sigma: Tensor | None = None  # per-head Gaussian width, axial attention only

    def __post_init__(self):
        dim = self.q.d_out
        if self.heads < 1 or dim % self.heads:
            raise ConfigError(f"model_dim {dim} is not divisible by heads={self.heads}")
        if self.sigma is not None and np.any(self.sigma.data <= 0):
            raise ConfigError("sigma must be positive")

    @property
    def model_dim(self):
        return self.q.d_out

    @classmethod
    def init(cls, rng, dim, heads, dtype=np.float32, gaussian=False):
        if heads < 1 or dim % heads:
            raise ConfigError(f"model_dim {dim} is not divisible by heads={heads}")
        lin = [Linear.init(rng, dim, dim, dtype) for _ in range(4)]
        sigma = ones((heads,), dtype) if gaussian else None
        return cls(heads, *lin, sigma=sigma)


@dataclass(frozen=True)
class WindowGeometry:
    """Token grid ``h x w`` split into ``window x window`` tiles, rolled by ``shift``."""

    h: int
    w: int
    window: int
    shift: int = 0

    def __post_init__(self):
        m = self.window
        if m < 1:
            raise GeometryError("window size must be positive")
        if self.h % m or self.w % m:
            raise GeometryError(f"grid {self.h}x{self.w} is not divisible by window {m}")
        if self.shift not in (0, m // 2):
            raise GeometryError(f"shift must be 0 or {m // 2} for window {m}, got {self.shift}")

    @property
    def num_windows(self):
        return (self.h // self.window) * (self.w // self.window)


def _to4d(x):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected h x w x D or B x h x w x D, got {x.shape}")
    return x, False


def _from4d(x, squeeze):
    return T.reshape(x, x.shape[1:]) if squeeze else x


# -- plain attention ---------------------------------------------------

def scaled_dot_product_attention(q, k, v, bias=None, return_weights=False):
    """``softmax(q k^T / sqrt(d) + bias) v`` over the last two axes."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    d = q.shape[-1]
    if d == 0:
        raise ContractError("attention head width must be positive")
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    logits = T.mul(T.matmul(q, kt), 1.0 / np.sqrt(d))
    if bias is not None:
        logits = T.add(logits, bias if isinstance(bias, Tensor) else Tensor(np.asarray(bias, dtype=q.dtype)))
    weights = T.softmax(logits, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def multi_head_self_attention(x, params, bias=None, return_weights=False):
    """Project to Q/K/V, attend per head on ``D/heads`` slices, concatenate, project."""
    dim = x.shape[-1]
    if dim != params.model_dim:
        raise ConfigError(f"input width {dim} does not match model_dim {params.model_dim}")
    heads = params.heads
    d = dim // heads
    lead, n = x.shape[:-2], x.shape[-2]
    nl = len(lead)
    swap = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split_heads(t):
        return T.transpose(T.reshape(t, lead + (n, heads, d)), swap)

    q, k, v = split_heads(params.q(x)), split_heads(params.k(x)), split_heads(params.v(x))
    out, weights = scaled_dot_product_attention(q, k, v, bias, return_weights=True)
    out = params.o(T.reshape(T.transpose(out, swap), lead + (n, dim)))
    return (out, weights) if return_weights else out


# -- windows -----------------------------------------------------------

def window_partition(x, window):
    """Split a map into non-overlapping windows.

    ``h x w x D`` becomes ``nW x M^2 x D``; batched input gives ``B x nW x M^2 x D``.
    Windows are ordered row-major over the window grid.
    """
    xb, squeeze = _to4d(x)
    b, h, w, d = xb.shape
    if h % window or w % window:
        raise GeometryError(f"grid {h}x{w} is not divisible by window {window}")
    t = T.reshape(xb, (b, h // window, window, w // window, window, d))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    t = T.reshape(t, (b, (h // window) * (w // window), window * window, d))
    return T.reshape(t, t.shape[1:]) if squeeze else t


def window_reverse(windows, h, w):
    """Inverse of :func:`window_partition`."""
    squeeze = windows.ndim == 3
    wb = T.reshape(windows, (1,) + windows.shape) if squeeze else windows
    b, nw, mm, d = wb.shape
    m = int(round(np.sqrt(mm)))
    if m * m != mm or h % m or w % m or nw != (h // m) * (w // m):
        raise GeometryError(f"{nw} windows of {mm} tokens cannot tile a {h}x{w} grid")
    t = T.reshape(wb, (b, h // m, w // m, m, m, d))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    t = T.reshape(t, (b, h, w, d))
    return T.reshape(t, t.shape[1:]) if squeeze else t


def cyclic_shift(x, shift, inverse=False):
    """Roll rows and columns by ``-shift`` (or ``+shift`` when ``inverse``)."""
    if shift == 0:
        return x
    s = shift if inverse else -shift
    return T.roll(x, (s, s), (x.ndim - 3, x.ndim - 2))


def build_shift_mask(geom):
    """Additive ``nW x N x N`` mask for shifted windows (0 or ``MASK_VALUE``)."""
    m, s = geom.window, geom.shift
    n = m * m
    if s == 0:
        return np.zeros((geom.num_windows, n, n))
    region = np.zeros((geom.h, geom.w))
    label = 0
    for hs in (slice(0, -m), slice(-m, -s), slice(-s, None)):
        for ws in (slice(0, -m), slice(-m, -s), slice(-s, None)):
            region[hs, ws] = label
            label += 1
    ids = window_partition(Tensor(region[:, :, None]), m).data[..., 0]
    return np.where(ids[:, :, None] != ids[:, None, :], MASK_VALUE, 0.0)


def _windowed(x, params, geom, shifted, return_weights):
    xb, squeeze = _to4d(x)
    b, h, w, d = xb.shape
    if (h, w) != (geom.h, geom.w):
        raise GeometryError(f"map {h}x{w} does not match window geometry {geom.h}x{geom.w}")
    shift = geom.shift if shifted else 0
    bias = None
    if shift:
        xb = cyclic_shift(xb, shift)
        bias = build_shift_mask(geom)[:, None, :, :].astype(xb.dtype)
    win = window_partition(xb, geom.window)
    out, weights = multi_head_self_attention(win, params, bias, return_weights=True)
    out = window_reverse(out, h, w)
    if shift:
        out = cyclic_shift(out, shift, inverse=True)
    out = _from4d(out, squeeze)
    return (out, weights) if return_weights else out


def w_msa(x, params, geom, return_weights=False):
    """Multi-head self-attention inside each non-overlapping window."""
    return _windowed(x, params, geom, False, return_weights)


def sw_msa(x, params, geom, return_weights=False):
    """Shifted-window attention: roll, masked window attention, roll back."""
    return _windowed(x, params, geom, True, return_weights)


# -- Gaussian-weighted axial attention ---------------------------------

def axial_geometry(h, w):
    """Squared grid distances and the row/column mask for an ``h x w`` grid."""
    coords = np.indices((h, w)).reshape(2, -1).T
    diff = coords[:, None, :] - coords[None, :, :]
    dist2 = (diff ** 2).sum(-1).astype(np.float64)
    axial = (diff[..., 0] == 0) | (diff[..., 1] == 0)
    return dist2, np.where(axial, 0.0, MASK_VALUE)


def gaussian_axial_attention(x, params, return_weights=False):
    """Axial attention whose logits carry a ``-dist^2 / (2 sigma^2)`` penalty.

    Each token attends to the ``h + w - 1`` tokens sharing its row or column.
    """
    if params.sigma is None:
        raise ConfigError("gaussian axial attention needs a sigma parameter")
    if np.any(params.sigma.data <= 0):
        raise ConfigError("sigma must be positive")
    xb, squeeze = _to4d(x)
    b, h, w, d = xb.shape
    dist2, mask = axial_geometry(h, w)
    heads = params.heads
    inv = T.div(0.5, T.mul(params.sigma, params.sigma))
    penalty = T.mul(T.reshape(inv, (heads, 1, 1)), Tensor(dist2[None].astype(xb.dtype)))
    bias = T.sub(Tensor(mask[None].astype(xb.dtype)), penalty)
    tokens = T.reshape(xb, (b, h * w, d))
    out, weights = multi_head_self_attention(tokens, params, bias, return_weights=True)
    out = _from4d(T.reshape(out, (b, h, w, d)), squeeze)
    return (out, weights) if return_weights else out


# -- LGG-SA ------------------------------------------------------------

@dataclass
class LGGParams:
    """Local window attention, window pooling, global axial attention, fusion."""

    local: AttentionParams
    glob: AttentionParams
    pool_logits: Tensor  # (p*p, groups)
    fuse: Linear  # 2C -> C
    window: int = 4

    @classmethod
    def init(cls, rng, dim, heads, window=4, dtype=np.float32):
        return cls(
            local=AttentionParams.init(rng, dim, heads, dtype),
            glob=AttentionParams.init(rng, dim, heads, dtype, gaussian=True),
            pool_logits=zeros((window * window, heads), dtype),
            fuse=Linear.init(rng, 2 * dim, dim, dtype),
            window=window,
        )


def window_pool(x, logits, window):
    """Collapse each window to one token with softmax-normalised position weights.

    ``logits`` is ``p^2 x G``; channel group ``g`` of every window is a convex
    combination of its ``p^2`` positions with weights ``softmax(logits[:, g])``.
    """
    xb, squeeze = _to4d(x)
    b, h, w, c = xb.shape
    pp, groups = logits.shape
    if pp != window * window:
        raise ConfigError(f"pooling logits have {pp} positions, window {window} needs {window * window}")
    if c % groups:
        raise ConfigError(f"{c} channels cannot be split into {groups} groups")
    win = window_partition(xb, window)
    nw = win.shape[1]
    win = T.reshape(win, (b, nw, pp, groups, c // groups))
    weights = T.reshape(T.softmax(logits, axis=0), (1, 1, pp, groups, 1))
    pooled = T.sum(T.mul(win, weights), axis=2)
    return _from4d(T.reshape(pooled, (b, h // window, w // window, c)), squeeze)


def lgg_sa(x, params, p=None):
    """Local-global Gaussian-weighted self-attention.

    Local window attention gives ``z_local``; pooled windows go through
    Gaussian axial attention, are bilinearly upsampled back, concatenated with
    ``z_local`` and projected to the input width.
    """
    p = params.window if p is None else p
    if p != params.window:
        raise ConfigError(f"window {p} does not match parameters built for {params.window}")
    xb, squeeze = _to4d(x)
    _, h, w, _ = xb.shape
    if h % p or w % p:
        raise GeometryError(f"grid {h}x{w} is not divisible by window {p}")
    z_local = w_msa(xb, params.local, WindowGeometry(h, w, p, 0))
    pooled = window_pool(z_local, params.pool_logits, p)
    z_global = gaussian_axial_attention(pooled, params.glob)
    up = T.bilinear_upsample(z_global, p)
    out = params.fuse(T.concat([z_local, up], axis=-1))
    return _from4d(out, squeeze)


# -- external attention ------------------------------------------------

@dataclass
class ExternalMemory:
    mk: Tensor  # S x d
    mv: Tensor  # S x d

    def __post_init__(self):
        if self.mk.ndim != 2 or self.mk.shape != self.mv.shape:
            raise ConfigError(f"memory units disagree: M_K {self.mk.shape}, M_V {self.mv.shape}")

    @property
    def units(self):
        return self.mk.shape[0]

    @classmethod
    def init(cls, rng, units, dim, dtype=np.float32):
        return cls(trunc_normal(rng, (units, dim), dtype=dtype), trunc_normal(rng, (units, dim), dtype=dtype))


def external_attention(x, mem, return_weights=False):
    """Attention against two learned memories shared by all inputs.

    ``x`` is ``... x N x d``. Affinities ``x M_K^T`` are softmax-normalised over
    the token axis, then L1-normalised over the memory axis, and the result
    reads out ``M_V``.
    """
    if x.shape[-1] != mem.mk.shape[1]:
        raise ConfigError(f"token width {x.shape[-1]} does not match memory width {mem.mk.shape[1]}")
    logits = T.linear(x, T.transpose(mem.mk))
    attn = T.softmax(logits, axis=-2)
    attn = T.div(attn, T.add(T.sum(attn, axis=-1, keepdims=True), 1e-9))
    out = T.linear(attn, mem.mv)
    return (out, attn) if return_weights else out
