"""Composite network blocks: embeddings, transformer layers, resampling, conv stems."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from . import tensor as T
from .errors import ConfigError, GeometryError
from .params import Conv, LayerNorm, Linear, zeros


def _to4d(x):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _from4d(x, squeeze):
    return T.reshape(x, x.shape[1:]) if squeeze else x


# -- feed-forward and embeddings ---------------------------------------

@dataclass
class MLPParams:
    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, rng, dim, ratio=4, dtype=np.float32):
        return cls(Linear.init(rng, dim, dim * ratio, dtype), Linear.init(rng, dim * ratio, dim, dtype))


def mlp(x, params):
    return params.fc2(T.gelu(params.fc1(x)))


@dataclass
class EmbeddingParams:
    patch: int
    proj: Linear  # (P*P*C_in) x D
    pos: object  # N x D position table

    @classmethod
    def init(cls, rng, patch, c_in, dim, tokens, dtype=np.float32, conv_like=False):
        return cls(patch, Linear.init(rng, patch * patch * c_in, dim, dtype, conv_like=conv_like),
                   zeros((tokens, dim), dtype))


def patch_embed(x, params):
    """Flatten ``P x P`` patches (row-major, channels last), project, add positions.

    ``H x W x C`` gives ``N x D`` tokens in row-major patch order; batched
    input gives ``B x N x D``.
    """
    xb, squeeze = _to4d(x)
    b, h, w, c = xb.shape
    p = params.patch
    if h % p or w % p:
        raise GeometryError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    n = (h // p) * (w // p)
    if params.pos.shape[0] != n:
        raise GeometryError(f"position table has {params.pos.shape[0]} rows, input gives {n} patches")
    t = T.reshape(xb, (b, h // p, p, w // p, p, c))
    t = T.reshape(T.transpose(t, (0, 1, 3, 2, 4, 5)), (b, n, p * p * c))
    z = T.add(params.proj(t), params.pos)
    return T.reshape(z, z.shape[1:]) if squeeze else z


# -- residual transformer blocks ---------------------------------------

@dataclass
class ResidualBlock:
    """Pre-norm residual pair: ``z + attn(LN(z))`` then ``z + MLP(LN(z))``.

    ``attn`` holds the mixer's parameters; which mixer runs is decided by the
    caller.
    """

    norm1: LayerNorm
    attn: object
    norm2: LayerNorm
    mlp: MLPParams

    @classmethod
    def init(cls, rng, dim, attn, mlp_ratio=4, dtype=np.float32):
        return cls(LayerNorm.init(dim, dtype), attn, LayerNorm.init(dim, dtype), MLPParams.init(rng, dim, mlp_ratio, dtype))


def residual_block(z, block, mixer):
    z = T.add(z, mixer(block.norm1(z), block.attn))
    return T.add(z, mlp(block.norm2(z), block.mlp))


def transformer_layer(rng, dim, heads, mlp_ratio=4, dtype=np.float32):
    return ResidualBlock.init(rng, dim, A.AttentionParams.init(rng, dim, heads, dtype), mlp_ratio, dtype)


def vit_layer(z, params):
    """One transformer encoder layer on ``... x N x D`` tokens."""
    return residual_block(z, params, A.multi_head_self_attention)


@dataclass
class SwinPair:
    regular: ResidualBlock
    shifted: ResidualBlock

    @classmethod
    def init(cls, rng, dim, heads, mlp_ratio=4, dtype=np.float32):
        return cls(transformer_layer(rng, dim, heads, mlp_ratio, dtype),
                   transformer_layer(rng, dim, heads, mlp_ratio, dtype))


def _grid_attention(window, shifted):
    def mix(z, attn):
        h, w = z.shape[-3], z.shape[-2]
        if h <= window and w <= window:
            # one window covers the grid: plain attention, nothing to shift
            lead = z.shape[:-3]
            tokens = T.reshape(z, lead + (h * w, z.shape[-1]))
            return T.reshape(A.multi_head_self_attention(tokens, attn), z.shape)
        geom = A.WindowGeometry(h, w, window, window // 2 if shifted else 0)
        return A.sw_msa(z, attn, geom) if shifted else A.w_msa(z, attn, geom)
    return mix


def swin_block_pair(z, params, window):
    """Window-attention block followed by a shifted-window block on ``h x w x D``.

    When the window covers the whole grid both blocks reduce to global
    attention without a shift.
    """
    z = residual_block(z, params.regular, _grid_attention(window, False))
    return residual_block(z, params.shifted, _grid_attention(window, True))


@dataclass
class MTMPair:
    local_global: ResidualBlock  # attn is LGGParams
    external: ResidualBlock  # attn is ExternalMemory

    @classmethod
    def init(cls, rng, dim, heads, window=4, units=64, mlp_ratio=4, dtype=np.float32):
        lgg = A.LGGParams.init(rng, dim, heads, window, dtype)
        mem = A.ExternalMemory.init(rng, units, dim, dtype)
        return cls(ResidualBlock.init(rng, dim, lgg, mlp_ratio, dtype),
                   ResidualBlock.init(rng, dim, mem, mlp_ratio, dtype))


def _external_on_grid(z, mem):
    lead, (h, w, c) = z.shape[:-3], z.shape[-3:]
    tokens = T.reshape(z, lead + (h * w, c))
    return T.reshape(A.external_attention(tokens, mem), z.shape)


def mtm_block_pair(z, params):
    """LGG-SA block followed by a global external-attention block on ``h x w x C``."""
    z = residual_block(z, params.local_global, A.lgg_sa)
    return residual_block(z, params.external, _external_on_grid)


# -- token resampling --------------------------------------------------

@dataclass
class MergeParams:
    norm: LayerNorm  # over 4D
    reduce: Linear  # 4D -> 2D, no bias

    @classmethod
    def init(cls, rng, dim, dtype=np.float32):
        return cls(LayerNorm.init(4 * dim, dtype), Linear.init(rng, 4 * dim, 2 * dim, dtype, bias=False))


def patch_merging(z, params):
    """Gather each 2x2 neighbourhood into ``4D`` channels, normalise, project to ``2D``.

    Neighbours are concatenated in the order (0,0), (1,0), (0,1), (1,1) as
    (row, column) offsets.
    """
    zb, squeeze = _to4d(z)
    b, h, w, d = zb.shape
    if h % 2 or w % 2:
        raise GeometryError(f"patch merging needs even extents, got {h}x{w}")
    t = T.reshape(zb, (b, h // 2, 2, w // 2, 2, d))
    t = T.reshape(T.transpose(t, (0, 1, 3, 4, 2, 5)), (b, h // 2, w // 2, 4 * d))
    return _from4d(params.reduce(params.norm(t)), squeeze)


@dataclass
class ExpandParams:
    expand: Linear  # D -> 2D, no bias

    @classmethod
    def init(cls, rng, dim, dtype=np.float32, conv_like=False):
        if dim % 2:
            raise ConfigError(f"patch expanding needs an even width, got {dim}")
        return cls(Linear.init(rng, dim, 2 * dim, dtype, bias=False, conv_like=conv_like))


def patch_expanding(z, params):
    """Project ``D -> 2D`` and unfold each token into a 2x2 block of ``D/2`` channels.

    Channel chunk ``2*dy + dx`` of the projection lands at row offset ``dy``,
    column offset ``dx``.
    """
    zb, squeeze = _to4d(z)
    b, h, w, d = zb.shape
    if d % 2:
        raise ConfigError(f"patch expanding needs an even width, got {d}")
    t = T.reshape(params.expand(zb), (b, h, w, 2, 2, d // 2))
    t = T.reshape(T.transpose(t, (0, 1, 3, 2, 4, 5)), (b, 2 * h, 2 * w, d // 2))
    return _from4d(t, squeeze)


# -- convolutional pieces ----------------------------------------------

@dataclass
class ConvBlock:
    """Two 3x3 same-padded convolutions, each followed by ReLU."""

    conv1: Conv
    conv2: Conv

    @classmethod
    def init(cls, rng, c_in, c_out, dtype=np.float32):
        return cls(Conv.init(rng, 3, c_in, c_out, dtype), Conv.init(rng, 3, c_out, c_out, dtype))

    @property
    def c_out(self):
        return self.conv2.c_out


def conv_block(x, params):
    x = T.relu(T.conv2d(x, params.conv1.w, params.conv1.b))
    return T.relu(T.conv2d(x, params.conv2.w, params.conv2.b))


@dataclass
class StemStage:
    block: ConvBlock
    down: Conv  # 3x3, stride 2

    @classmethod
    def init(cls, rng, c_in, c_out, dtype=np.float32):
        return cls(ConvBlock.init(rng, c_in, c_out, dtype), Conv.init(rng, 3, c_out, c_out, dtype))


def init_stem(rng, c_in, widths, dtype=np.float32):
    stages = []
    for width in widths:
        stages.append(StemStage.init(rng, c_in, width, dtype))
        c_in = width
    return stages


def conv_stem(x, stages):
    """Shallow CNN feature extractor.

    Each stage runs a :class:`ConvBlock` and a stride-2 convolution with ReLU.
    Returns the stage outputs at 1/2, 1/4, ... of the input resolution.
    """
    h, w = x.shape[-3], x.shape[-2]
    scale = 2 ** len(stages)
    if h % scale or w % scale:
        raise GeometryError(f"input {h}x{w} is not divisible by {scale} for a {len(stages)}-stage stem")
    outs = []
    for stage in stages:
        x = conv_block(x, stage.block)
        x = T.relu(T.conv2d(x, stage.down.w, stage.down.b, stride=2))
        outs.append(x)
    return outs


def skip_fuse(decoder_map, encoder_map, proj):
    """Concatenate channels of two same-size maps and project with a 1x1 linear layer."""
    if decoder_map.shape[:-1] != encoder_map.shape[:-1]:
        raise GeometryError(f"cannot fuse maps of shapes {decoder_map.shape} and {encoder_map.shape}")
    return proj(T.concat([decoder_map, encoder_map], axis=-1))


# -- block stacks ------------------------------------------------------

KINDS = ("vit_layer", "swin_pair", "mtm_pair", "conv_block", "merge", "expand")


@dataclass
class BlockSpec:
    kind: str
    params: object
    window: int = 0  # swin_pair only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}; expected one of {', '.join(KINDS)}")


def _width(params):
    if isinstance(params, ResidualBlock):
        return params.norm1.gamma.shape[0]
    if isinstance(params, SwinPair):
        return _width(params.regular)
    if isinstance(params, MTMPair):
        return _width(params.local_global)
    if isinstance(params, MergeParams):
        return params.norm.gamma.shape[0] // 4
    if isinstance(params, ExpandParams):
        return params.expand.d_in
    if isinstance(params, ConvBlock):
        return params.conv1.w.shape[2]
    raise ConfigError(f"unsupported block parameters {type(params).__name__}")


def block_output_shape(spec, shape):
    """Per-sample output shape of a block, or :class:`GeometryError` if it does not fit."""
    shape = tuple(shape)
    width = _width(spec.params)
    if shape[-1] != width:
        raise GeometryError(f"{spec.kind} expects width {width}, got shape {shape}")
    if spec.kind == "vit_layer":
        if len(shape) != 2:
            raise GeometryError(f"vit_layer expects N x D tokens, got {shape}")
        return shape
    if len(shape) != 3:
        raise GeometryError(f"{spec.kind} expects an h x w x C map, got {shape}")
    h, w, c = shape
    if spec.kind == "swin_pair":
        m = spec.window
        if not (h <= m and w <= m) and (h % m or w % m):
            raise GeometryError(f"grid {h}x{w} is not divisible by window {m}")
        return shape
    if spec.kind == "mtm_pair":
        p = spec.params.local_global.attn.window
        if h % p or w % p:
            raise GeometryError(f"grid {h}x{w} is not divisible by window {p}")
        return shape
    if spec.kind == "conv_block":
        return (h, w, spec.params.c_out)
    if spec.kind == "merge":
        if h % 2 or w % 2:
            raise GeometryError(f"patch merging needs even extents, got {h}x{w}")
        return (h // 2, w // 2, 2 * c)
    return (2 * h, 2 * w, c // 2)


def apply_block(spec, x):
    if spec.kind == "vit_layer":
        return vit_layer(x, spec.params)
    if spec.kind == "swin_pair":
        return swin_block_pair(x, spec.params, spec.window)
    if spec.kind == "mtm_pair":
        return mtm_block_pair(x, spec.params)
    if spec.kind == "conv_block":
        return conv_block(x, spec.params)
    if spec.kind == "merge":
        return patch_merging(x, spec.params)
    return patch_expanding(x, spec.params)


@dataclass
class BlockStack:
    blocks: list = field(default_factory=list)

    def output_shape(self, shape):
        for spec in self.blocks:
            shape = block_output_shape(spec, shape)
        return shape

    def __call__(self, x):
        for spec in self.blocks:
            x = apply_block(spec, x)
        return x

    def __len__(self):
        return len(self.blocks)
