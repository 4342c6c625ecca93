"""The four segmentation networks and their configuration presets.

Every model maps a ``B x H x W x 3`` batch to ``B x H x W x 1`` logits:

* ``unet``: convolutional encoder/decoder with max pooling, transposed
  convolutions and concatenated skips.
* ``transunet``: a CNN stem down to 1/16 resolution, 1x1 patch tokens through
  transformer layers, then a bilinear-upsampling decoder fed by the stem skips.
* ``swinunet``: 4x4 patch tokens through shifted-window transformer pairs with
  patch merging, mirrored by patch expanding with fused skips.
* ``mtunet``: convolutional shallow levels, mixed transformer pairs (LGG-SA and
  external attention) at deep levels, strided convolution resampling.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import blocks as B
from . import tensor as T
from .errors import ConfigError, ContractError, GeometryError
from .params import Conv, LayerNorm, Linear, named_tensors
from .tensor import Tensor

ARCHS = ("unet", "transunet", "swinunet", "mtunet")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture choice and scale.

    Field meaning per architecture:

    * ``stem_widths``: unet encoder widths, one per level (the last is the
      bottleneck); transunet stem stage widths; mtunet convolutional level widths.
    * ``embed_dim``: token width of the first transformer level. Swin and MTM
      levels double it at each deeper level.
    * ``depths`` and ``heads``: transformer blocks and heads per level. Swin and
      MTM blocks come in pairs, so their depths must be even.
    """

    arch: str
    input_size: tuple = (64, 64)
    embed_dim: int = 32
    depths: tuple = (2, 2)
    heads: tuple = (2, 4)
    window_size: int = 4
    lgg_window: int = 4
    stem_widths: tuple = (8, 16, 32, 32)
    mlp_ratio: int = 4
    memory_units: int = 16
    patch_size: int = 4
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        for name in ("depths", "heads", "stem_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    @classmethod
    def toy(cls, arch, input_size=(64, 64)):
        """Desk-scale preset: widths at most 32, at most two blocks per level."""
        presets = {
            "unet": dict(stem_widths=(8, 16, 32, 32, 32)),
            "transunet": dict(stem_widths=(8, 16, 32, 32), embed_dim=32, depths=(2,), heads=(2,)),
            "swinunet": dict(embed_dim=32, depths=(2, 2), heads=(2, 4), window_size=4, patch_size=4),
            "mtunet": dict(stem_widths=(8, 16), embed_dim=16, depths=(2, 2), heads=(2, 4),
                           lgg_window=4, memory_units=16),
        }
        if arch not in presets:
            raise ConfigError(f"unknown arch {arch!r}; expected one of {', '.join(ARCHS)}")
        return cls(arch=arch, input_size=input_size, **presets[arch])

    @classmethod
    def full(cls, arch, input_size=(224, 224)):
        """Full-scale preset at 224x224 input, window 7, 4x4 patches."""
        presets = {
            "unet": dict(stem_widths=(32, 64, 128, 256, 512)),
            "transunet": dict(stem_widths=(64, 128, 256, 512), embed_dim=768, depths=(12,), heads=(12,)),
            "swinunet": dict(embed_dim=96, depths=(2, 2, 2, 2), heads=(3, 6, 12, 24), window_size=7, patch_size=4),
            "mtunet": dict(stem_widths=(32, 64), embed_dim=128, depths=(2, 2), heads=(4, 8),
                           lgg_window=4, memory_units=64),
        }
        if arch not in presets:
            raise ConfigError(f"unknown arch {arch!r}; expected one of {', '.join(ARCHS)}")
        return cls(arch=arch, input_size=input_size, **presets[arch])

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        """Raise :class:`ConfigError` listing every violated constraint."""
        problems = []
        h, w = self.input_size
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {', '.join(ARCHS)}")
        if self.out_channels != 1:
            problems.append(f"out_channels must be 1, got {self.out_channels}")
        if min(self.input_size) < 1 or self.mlp_ratio < 1:
            problems.append("input_size and mlp_ratio must be positive")

        def divisible(extent_name, extent, by):
            if extent % by:
                problems.append(f"{extent_name} {extent} is not divisible by {by}")

        def check_heads(dims):
            if len(self.heads) != len(self.depths):
                problems.append(f"heads {self.heads} and depths {self.depths} differ in length")
                return
            for dim, hd in zip(dims, self.heads):
                if hd < 1 or dim % hd:
                    problems.append(f"width {dim} is not divisible by {hd} heads")

        if self.arch == "unet":
            if len(self.stem_widths) < 2:
                problems.append("unet needs at least two levels in stem_widths")
            scale = 2 ** (len(self.stem_widths) - 1)
            divisible("height", h, scale)
            divisible("width", w, scale)
        elif self.arch == "transunet":
            scale = 2 ** len(self.stem_widths)
            divisible("height", h, scale)
            divisible("width", w, scale)
            if len(self.depths) != 1 or self.depths[0] < 1:
                problems.append(f"transunet takes a single positive depth, got {self.depths}")
            check_heads([self.embed_dim])
        elif self.arch == "swinunet":
            levels = len(self.depths)
            dims = [self.embed_dim * 2 ** i for i in range(levels)]
            check_heads(dims)
            if any(d < 2 or d % 2 for d in self.depths):
                problems.append(f"swin depths must be even and positive, got {self.depths}")
            p = self.patch_size
            if p < 2 or p & (p - 1):
                problems.append(f"swin patch_size must be a power of two, got {p}")
            elif self.embed_dim % p:
                problems.append(f"embed_dim {self.embed_dim} must be divisible by patch_size {p} for the final expansions")
            divisible("height", h, self.patch_size * 2 ** (levels - 1))
            divisible("width", w, self.patch_size * 2 ** (levels - 1))
            m = self.window_size
            for i in range(levels):
                gh, gw = h // self.patch_size // 2 ** i, w // self.patch_size // 2 ** i
                if not (gh <= m and gw <= m) and (gh % m or gw % m):
                    problems.append(f"level {i} grid {gh}x{gw} is not divisible by window {m}")
        elif self.arch == "mtunet":
            levels = len(self.depths)
            dims = [self.embed_dim * 2 ** i for i in range(levels)]
            check_heads(dims)
            if not self.stem_widths:
                problems.append("mtunet needs at least one convolutional level")
            if any(d < 2 or d % 2 for d in self.depths):
                problems.append(f"mtm depths must be even and positive, got {self.depths}")
            if self.memory_units < 1:
                problems.append("memory_units must be positive")
            n_conv = len(self.stem_widths)
            for i in range(levels):
                scale = 2 ** (n_conv + i)
                divisible("height", h, scale * self.lgg_window)
                divisible("width", w, scale * self.lgg_window)
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(dict.fromkeys(problems)))
        return self


# -- parameter trees ---------------------------------------------------

@dataclass
class UNetParams:
    enc: list  # ConvBlock per level, last is the bottleneck
    ups: list  # transposed 2x2 convs, deepest first
    dec: list  # ConvBlock per decoder level, deepest first
    head: Conv


@dataclass
class TransUNetParams:
    stem: list
    embed: B.EmbeddingParams
    layers: list
    norm: LayerNorm
    neck: Conv
    dec: list  # ConvBlock per decoder level, coarsest first
    head: Conv


@dataclass
class SwinUNetParams:
    embed: B.EmbeddingParams
    embed_norm: LayerNorm
    enc: list  # list of SwinPair lists per level
    merges: list
    expands: list  # deepest first
    fuses: list
    dec: list  # list of SwinPair lists, deepest first
    norm: LayerNorm
    final: list  # log2(patch_size) ExpandParams back to full resolution
    head: Linear


@dataclass
class MTUNetParams:
    conv_enc: list  # ConvBlock per convolutional level
    downs: list  # stride-2 3x3 convs into levels 1..L-1
    mtm_enc: list  # list of MTMPair lists per transformer level
    ups: list  # stride-2 3x3 transposed convs, deepest first
    fuses: list
    mtm_dec: list  # MTMPair lists for transformer levels above the bottleneck, deepest first
    conv_dec: list  # ConvBlock per convolutional level, deepest first
    head: Conv


@dataclass
class Model:
    config: ModelConfig
    params: object = field(repr=False)

    @property
    def arch(self):
        return self.config.arch

    def named_parameters(self):
        return list(named_tensors(self.params))

    def parameters(self):
        return [t for _, t in named_tensors(self.params)]

    def __call__(self, batch):
        return forward(self, batch)


def _build_unet(cfg, rng, dtype):
    widths = cfg.stem_widths
    enc, c_in = [], 3
    for width in widths:
        enc.append(B.ConvBlock.init(rng, c_in, width, dtype))
        c_in = width
    ups, dec = [], []
    for i in range(len(widths) - 2, -1, -1):
        ups.append(Conv.init(rng, 2, widths[i + 1], widths[i], dtype))
        dec.append(B.ConvBlock.init(rng, 2 * widths[i], widths[i], dtype))
    return UNetParams(enc, ups, dec, Conv.init(rng, 1, widths[0], 1, dtype))


def _build_transunet(cfg, rng, dtype):
    widths = cfg.stem_widths
    h, w = cfg.input_size
    scale = 2 ** len(widths)
    stem = B.init_stem(rng, 3, widths, dtype)
    dim = cfg.embed_dim
    embed = B.EmbeddingParams.init(rng, 1, widths[-1], dim, (h // scale) * (w // scale), dtype)
    layers = [B.transformer_layer(rng, dim, cfg.heads[0], cfg.mlp_ratio, dtype) for _ in range(cfg.depths[0])]
    neck = Conv.init(rng, 3, dim, widths[-1], dtype)
    dec, c_in = [], widths[-1]
    for i in range(len(widths) - 2, -1, -1):
        dec.append(B.ConvBlock.init(rng, c_in + widths[i], widths[i], dtype))
        c_in = widths[i]
    dec.append(B.ConvBlock.init(rng, c_in + 3, widths[0], dtype))
    return TransUNetParams(stem, embed, layers, LayerNorm.init(dim, dtype), neck, dec,
                           Conv.init(rng, 1, widths[0], 1, dtype))


def _build_swinunet(cfg, rng, dtype):
    h, w = cfg.input_size
    p = cfg.patch_size
    levels = len(cfg.depths)
    dims = [cfg.embed_dim * 2 ** i for i in range(levels)]
    embed = B.EmbeddingParams.init(rng, p, 3, dims[0], (h // p) * (w // p), dtype, conv_like=True)
    enc, merges = [], []
    for i in range(levels):
        enc.append([B.SwinPair.init(rng, dims[i], cfg.heads[i], cfg.mlp_ratio, dtype)
                    for _ in range(cfg.depths[i] // 2)])
        if i < levels - 1:
            merges.append(B.MergeParams.init(rng, dims[i], dtype))
    expands, fuses, dec = [], [], []
    for i in range(levels - 2, -1, -1):
        expands.append(B.ExpandParams.init(rng, dims[i + 1], dtype))
        fuses.append(Linear.init(rng, 2 * dims[i], dims[i], dtype))
        dec.append([B.SwinPair.init(rng, dims[i], cfg.heads[i], cfg.mlp_ratio, dtype)
                    for _ in range(cfg.depths[i] // 2)])
    c = dims[0]
    final = []
    for _ in range(p.bit_length() - 1):
        final.append(B.ExpandParams.init(rng, c, dtype, conv_like=True))
        c //= 2
    return SwinUNetParams(embed, LayerNorm.init(dims[0], dtype), enc, merges, expands, fuses, dec,
                          LayerNorm.init(dims[0], dtype), final, Linear.init(rng, c, 1, dtype, conv_like=True))


def _mtunet_widths(cfg):
    return list(cfg.stem_widths) + [cfg.embed_dim * 2 ** i for i in range(len(cfg.depths))]


def _build_mtunet(cfg, rng, dtype):
    widths = _mtunet_widths(cfg)
    n_conv = len(cfg.stem_widths)
    conv_enc, c_in = [], 3
    for i in range(n_conv):
        conv_enc.append(B.ConvBlock.init(rng, c_in if i == 0 else widths[i], widths[i], dtype))
        c_in = widths[i]
    downs = [Conv.init(rng, 3, widths[i - 1], widths[i], dtype) for i in range(1, len(widths))]

    def pairs(level):
        t = level - n_conv
        return [B.MTMPair.init(rng, widths[level], cfg.heads[t], cfg.lgg_window, cfg.memory_units,
                               cfg.mlp_ratio, dtype) for _ in range(cfg.depths[t] // 2)]

    mtm_enc = [pairs(level) for level in range(n_conv, len(widths))]
    ups, fuses, mtm_dec, conv_dec = [], [], [], []
    for level in range(len(widths) - 2, -1, -1):
        ups.append(Conv.init(rng, 3, widths[level + 1], widths[level], dtype))
        fuses.append(Linear.init(rng, 2 * widths[level], widths[level], dtype))
        if level >= n_conv:
            mtm_dec.append(pairs(level))
        else:
            conv_dec.append(B.ConvBlock.init(rng, widths[level], widths[level], dtype))
    return MTUNetParams(conv_enc, downs, mtm_enc, ups, fuses, mtm_dec, conv_dec,
                        Conv.init(rng, 1, widths[0], 1, dtype))


_BUILDERS = {"unet": _build_unet, "transunet": _build_transunet,
             "swinunet": _build_swinunet, "mtunet": _build_mtunet}


def build_model(config, seed=0, dtype=np.float32):
    """Build and initialise a model; equal seeds give bitwise-equal parameters."""
    config.validate()
    rng = np.random.default_rng(seed)
    return Model(config, _BUILDERS[config.arch](config, rng, np.dtype(dtype)))


# -- forward passes ----------------------------------------------------

def _conv(x, c, stride=1):
    return T.conv2d(x, c.w, c.b, stride=stride)


def _forward_unet(p, x):
    skips = []
    for i, blk in enumerate(p.enc):
        if i:
            x = T.max_pool2d(x)
        x = B.conv_block(x, blk)
        skips.append(x)
    skips.pop()
    for up, blk in zip(p.ups, p.dec):
        x = T.transposed_conv2d(x, up.w, up.b, stride=2)
        x = B.conv_block(T.concat([x, skips.pop()], axis=-1), blk)
    return _conv(x, p.head)


def _forward_transunet(p, x):
    image = x
    feats = B.conv_stem(x, p.stem)
    deep = feats[-1]
    b, gh, gw, _ = deep.shape
    z = B.patch_embed(deep, p.embed)
    for layer in p.layers:
        z = B.vit_layer(z, layer)
    z = T.reshape(p.norm(z), (b, gh, gw, z.shape[-1]))
    x = T.relu(_conv(z, p.neck))
    skips = [image] + feats[:-1]
    for blk in p.dec:
        x = T.bilinear_upsample(x, 2)
        x = B.conv_block(T.concat([x, skips.pop()], axis=-1), blk)
    return _conv(x, p.head)


def _forward_swinunet(p, x, cfg):
    b, h, w, _ = x.shape
    ps = cfg.patch_size
    z = B.patch_embed(x, p.embed)
    z = T.reshape(p.embed_norm(z), (b, h // ps, w // ps, z.shape[-1]))
    skips = []
    for i, pairs in enumerate(p.enc):
        for pair in pairs:
            z = B.swin_block_pair(z, pair, cfg.window_size)
        if i < len(p.merges):
            skips.append(z)
            z = B.patch_merging(z, p.merges[i])
    for expand, fuse, pairs in zip(p.expands, p.fuses, p.dec):
        z = B.skip_fuse(B.patch_expanding(z, expand), skips.pop(), fuse)
        for pair in pairs:
            z = B.swin_block_pair(z, pair, cfg.window_size)
    z = p.norm(z)
    for expand in p.final:
        z = B.patch_expanding(z, expand)
    return p.head(z)


def _forward_mtunet(p, x):
    skips = []
    n_conv = len(p.conv_enc)
    x = B.conv_block(x, p.conv_enc[0])
    for level in range(1, n_conv + len(p.mtm_enc)):
        skips.append(x)
        x = T.relu(_conv(x, p.downs[level - 1], stride=2))
        if level < n_conv:
            x = B.conv_block(x, p.conv_enc[level])
        else:
            for pair in p.mtm_enc[level - n_conv]:
                x = B.mtm_block_pair(x, pair)
    mtm_dec, conv_dec = iter(p.mtm_dec), iter(p.conv_dec)
    for up, fuse in zip(p.ups, p.fuses):
        skip = skips.pop()
        x = B.skip_fuse(T.transposed_conv2d(x, up.w, up.b, stride=2), skip, fuse)
        if len(skips) >= n_conv:
            for pair in next(mtm_dec):
                x = B.mtm_block_pair(x, pair)
        else:
            x = B.conv_block(x, next(conv_dec))
    return _conv(x, p.head)


def forward(model, batch):
    """Full-resolution single-channel logits for a ``B x H x W x 3`` batch."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    cfg = model.config
    if x.ndim != 4 or x.shape[1:3] != cfg.input_size or x.shape[3] != 3:
        raise GeometryError(f"batch shape {x.shape} does not match model input {cfg.input_size} x 3")
    dtype = model.params.head.w.dtype
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype))
    p = model.params
    if cfg.arch == "unet":
        return _forward_unet(p, x)
    if cfg.arch == "transunet":
        return _forward_transunet(p, x)
    if cfg.arch == "swinunet":
        return _forward_swinunet(p, x, cfg)
    return _forward_mtunet(p, x)


def predict_mask(logits, threshold=0.5):
    """Binary mask ``sigmoid(logits) >= threshold``; a trailing channel axis is dropped."""
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim >= 3 and data.shape[-1] == 1:
        data = data[..., 0]
    return (expit(data) >= threshold).astype(np.uint8)


def param_count(model):
    return int(sum(t.size for _, t in named_tensors(model.params)))


def model_size_mb(model):
    """Parameter storage in single precision, in MiB."""
    return param_count(model) * 4 / 2 ** 20
