"""Model wiring: condition feature extractor and noise-prediction U-Net.

The extractor is an encoder (optionally built from paired deformable line
convolutions) whose per-level features condition the denoiser. The
denoiser is a small U-Net over x_t with a sinusoidal time embedding. The
condition always enters by plain addition (bottleneck plus one add per
decoder level); when fusion is enabled the attention blocks are applied
on top of that additive path, so ablation flags only ever add modules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import (
    ChannelFusionBlock,
    SpatialFusionBlock,
    channel_fusion_forward,
    init_channel_fusion,
    init_spatial_fusion,
    spatial_fusion_forward,
)
from .autodiff import Tensor
from .deform import PairedDeformableBlock, init_paired_block, paired_forward
from .kalman import ChainMode, KalmanConfig


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    depth: int = 3
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 64
    ld_enabled: bool = True
    kalman_enabled: bool = True
    fusion_enabled: bool = True
    max_offset: float = 3.0
    kalman: KalmanConfig = field(default_factory=KalmanConfig)

    def validate(self) -> None:
        if self.base_channels < 1 or self.depth < 1:
            raise ValueError("base_channels and depth must be positive")
        if len(self.channel_multipliers) != self.depth:
            raise ValueError(
                f"need one channel multiplier per level: "
                f"{len(self.channel_multipliers)} given for depth {self.depth}"
            )
        if self.time_embed_dim % 2 or self.time_embed_dim < 2:
            raise ValueError("time_embed_dim must be even and >= 2")
        if any((self.base_channels * m) % 2 for m in self.channel_multipliers):
            raise ValueError("level channel counts must be even (paired orientations)")
        self.kalman.validate()

    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def chain_mode(self) -> ChainMode:
        return ChainMode.KALMAN if self.kalman_enabled else ChainMode.CUMULATIVE


def _norm_groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def time_embedding(t: int, dim: int) -> Tensor:
    """Raw sinusoidal embedding of a step index, geometric frequency ladder."""
    if dim % 2 or dim < 2:
        raise ValueError("embedding dim must be even and >= 2")
    if not (isinstance(t, (int, np.integer)) and t >= 1):
        raise ValueError(f"step index must be a positive integer, got {t}")
    half = dim // 2
    idx = np.arange(half, dtype=np.float64)
    freqs = np.exp(-np.log(10000.0) * idx / max(half - 1, 1))
    ang = float(t) * freqs
    return Tensor(np.concatenate([np.sin(ang), np.cos(ang)]))


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> Tensor:
    std = np.sqrt(2.0 / (c_in * k * k))
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class ConvBlock:
    """3x3 conv, group norm, SiLU."""

    def __init__(self, w: Tensor, b: Tensor, gamma: Tensor, beta: Tensor):
        self.w, self.b, self.gamma, self.beta = w, b, gamma, beta

    def forward(self, x: Tensor) -> Tensor:
        h = ad.conv2d(x, self.w, self.b, stride=1, pad=1)
        h = ad.group_norm(h, self.gamma, self.beta, groups=_norm_groups(self.w.shape[0]))
        return ad.silu(h)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b, "gamma": self.gamma, "beta": self.beta}


def init_conv_block(rng: np.random.Generator, c_in: int, c_out: int) -> ConvBlock:
    return ConvBlock(_he_conv(rng, c_out, c_in, 3), _zeros(c_out), _ones(c_out), _zeros(c_out))


class DeformBlock:
    """Paired deformable line conv, group norm, SiLU."""

    def __init__(self, paired: PairedDeformableBlock, gamma: Tensor, beta: Tensor):
        self.paired, self.gamma, self.beta = paired, gamma, beta

    def forward(self, x: Tensor) -> Tensor:
        h = paired_forward(self.paired, x)
        h = ad.group_norm(h, self.gamma, self.beta, groups=_norm_groups(self.paired.c_out))
        return ad.silu(h)

    def params(self) -> dict[str, Tensor]:
        named = dict(self.paired.params())
        named["gamma"] = self.gamma
        named["beta"] = self.beta
        return named


def init_deform_block(rng: np.random.Generator, c_in: int, c_out: int, config: ModelConfig) -> DeformBlock:
    paired = init_paired_block(
        rng, c_in, c_out, config.chain_mode(), config.kalman, config.max_offset
    )
    return DeformBlock(paired, _ones(c_out), _zeros(c_out))


class ExtractorStage:
    def __init__(self, b0, b1):
        self.b0, self.b1 = b0, b1

    def forward(self, x: Tensor) -> Tensor:
        return self.b1.forward(self.b0.forward(x))

    def params(self) -> dict[str, Tensor]:
        named = {}
        for pfx, blk in (("b0", self.b0), ("b1", self.b1)):
            for k, t in blk.params().items():
                named[f"{pfx}.{k}"] = t
        return named


class DenoiserStage:
    """One U-Net level: two conv blocks with a time bias between them.

    Decoder stages also carry the post-upsample projection conv and,
    when fusion is on, a channel fusion block.
    """

    def __init__(self, b0: ConvBlock, b1: ConvBlock, temb_w: Tensor, temb_b: Tensor,
                 up_w: Tensor | None = None, up_b: Tensor | None = None,
                 fuse_channel: ChannelFusionBlock | None = None):
        self.b0, self.b1 = b0, b1
        self.temb_w, self.temb_b = temb_w, temb_b
        self.up_w, self.up_b = up_w, up_b
        self.fuse_channel = fuse_channel

    def blocks_forward(self, x: Tensor, temb: Tensor) -> Tensor:
        x = self.b0.forward(x)
        x = ad.add_channel_map(x, ad.linear(temb, self.temb_w, self.temb_b))
        return self.b1.forward(x)

    def params(self) -> dict[str, Tensor]:
        named = {}
        for pfx, blk in (("b0", self.b0), ("b1", self.b1)):
            for k, t in blk.params().items():
                named[f"{pfx}.{k}"] = t
        named["temb.w"] = self.temb_w
        named["temb.b"] = self.temb_b
        if self.up_w is not None:
            named["up.w"] = self.up_w
            named["up.b"] = self.up_b
        if self.fuse_channel is not None:
            for k, t in self.fuse_channel.params().items():
                named[f"fuse_channel.{k}"] = t
        return named


class ModelBundle:
    """Every parameter of the extractor/denoiser pair under dotted names."""

    def __init__(self, config: ModelConfig, ext_stages, ext_bottleneck,
                 dn_enc, dn_bottleneck, dn_dec, fuse_spatial: SpatialFusionBlock | None,
                 temb_mlp: dict[str, Tensor], head_w: Tensor, head_b: Tensor):
        self.config = config
        self.ext_stages = ext_stages
        self.ext_bottleneck = ext_bottleneck
        self.dn_enc = dn_enc
        self.dn_bottleneck = dn_bottleneck
        self.dn_dec = dn_dec
        self.fuse_spatial = fuse_spatial
        self.temb_mlp = temb_mlp
        self.head_w, self.head_b = head_w, head_b
        self._named = self._collect()

    def _collect(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}

        def put(prefix, items):
            for k, t in items.items():
                key = f"{prefix}.{k}"
                if key in named:
                    raise ValueError(f"duplicate parameter name {key}")
                named[key] = t

        for i, st in enumerate(self.ext_stages):
            put(f"ext.enc{i}", st.params())
        put("ext.bottleneck", self.ext_bottleneck.params())
        for i, st in enumerate(self.dn_enc):
            put(f"dn.enc{i}", st.params())
        put("dn.bottleneck", self.dn_bottleneck.params())
        for i, st in enumerate(self.dn_dec):
            put(f"dn.dec{i}", st.params())
        if self.fuse_spatial is not None:
            put("dn.fuse_spatial", self.fuse_spatial.params())
        put("dn.temb", self.temb_mlp)
        put("dn.head", {"w": self.head_w, "b": self.head_b})
        return named

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._named)

    def param_count(self) -> int:
        return sum(t.size for t in self._named.values())

    def zero_grad(self) -> None:
        for t in self._named.values():
            t.zero_grad()


def init_model(config: ModelConfig, seed: int) -> ModelBundle:
    """Deterministic parameter initialization from one seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    chs = config.channels()
    dim = config.time_embed_dim

    def make_ext_block(c_in, c_out):
        if config.ld_enabled:
            return init_deform_block(rng, c_in, c_out, config)
        return init_conv_block(rng, c_in, c_out)

    ext_stages = []
    c_prev = 1
    for c in chs:
        ext_stages.append(ExtractorStage(make_ext_block(c_prev, c), make_ext_block(c, c)))
        c_prev = c
    ext_bottleneck = ExtractorStage(
        init_conv_block(rng, chs[-1], chs[-1]), init_conv_block(rng, chs[-1], chs[-1])
    )

    dn_enc = []
    c_prev = 1
    for c in chs:
        dn_enc.append(DenoiserStage(
            init_conv_block(rng, c_prev, c), init_conv_block(rng, c, c),
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(c, dim)), requires_grad=True),
            _zeros(c),
        ))
        c_prev = c
    dn_bottleneck = DenoiserStage(
        init_conv_block(rng, chs[-1], chs[-1]), init_conv_block(rng, chs[-1], chs[-1]),
        Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(chs[-1], dim)), requires_grad=True),
        _zeros(chs[-1]),
    )

    dn_dec = []
    for level in range(config.depth):
        c = chs[level]
        c_above = chs[min(level + 1, config.depth - 1)]
        dn_dec.append(DenoiserStage(
            init_conv_block(rng, 2 * c, c), init_conv_block(rng, c, c),
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(c, dim)), requires_grad=True),
            _zeros(c),
            up_w=_he_conv(rng, c, c_above, 3), up_b=_zeros(c),
            fuse_channel=init_channel_fusion(rng, c) if config.fusion_enabled else None,
        ))

    fuse_spatial = init_spatial_fusion(rng, chs[-1]) if config.fusion_enabled else None
    temb_mlp = {
        "w1": Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim)), requires_grad=True),
        "b1": _zeros(dim),
        "w2": Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim)), requires_grad=True),
        "b2": _zeros(dim),
    }
    head_w = _he_conv(rng, 1, chs[0], 3)
    head_b = _zeros(1)
    return ModelBundle(config, ext_stages, ext_bottleneck, dn_enc, dn_bottleneck,
                       dn_dec, fuse_spatial, temb_mlp, head_w, head_b)


def _ensure_4d(x: Tensor, what: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"{what} must be (C,H,W) or (N,C,H,W), got {x.shape}")


def extractor_forward(bundle: ModelBundle, image: Tensor):
    """Per-level condition features plus the bottleneck map.

    Returns (skips, bottleneck): skips[l] is the level-l map before its
    downsample; batchness follows the input.
    """
    x, squeeze = _ensure_4d(image if isinstance(image, Tensor) else Tensor(image), "image")
    n, c, h, w = x.shape
    if c != 1:
        raise ValueError(f"extractor expects a single-channel image, got {c} channels")
    factor = 2 ** bundle.config.depth
    if h % factor or w % factor:
        raise ValueError(f"spatial size {h}x{w} not divisible by {factor}")
    skips = []
    for stage in bundle.ext_stages:
        x = stage.forward(x)
        skips.append(x)
        x = ad.avg_pool2(x)
    bottleneck = bundle.ext_bottleneck.forward(x)
    if squeeze:
        skips = [ad.reshape(s, s.shape[1:]) for s in skips]
        bottleneck = ad.reshape(bottleneck, bottleneck.shape[1:])
    return skips, bottleneck


def denoiser_forward(bundle: ModelBundle, x_t: Tensor, t: int, cond) -> Tensor:
    """Predict the noise in x_t given the extractor's condition features."""
    if not (isinstance(t, (int, np.integer)) and t >= 1):
        raise ValueError(f"step index must be a positive integer, got {t}")
    x, squeeze = _ensure_4d(x_t if isinstance(x_t, Tensor) else Tensor(x_t), "x_t")
    skips_cond, bn_cond = cond
    skips_cond = [_ensure_4d(s, "condition skip")[0] for s in skips_cond]
    bn_cond = _ensure_4d(bn_cond, "condition bottleneck")[0]
    n, c, h, w = x.shape
    if c != 1:
        raise ValueError(f"denoiser expects a single-channel x_t, got {c} channels")
    factor = 2 ** bundle.config.depth
    if h % factor or w % factor:
        raise ValueError(f"spatial size {h}x{w} not divisible by {factor}")
    if len(skips_cond) != bundle.config.depth:
        raise ValueError(f"expected {bundle.config.depth} condition skips, got {len(skips_cond)}")

    raw = time_embedding(t, bundle.config.time_embed_dim)
    temb = Tensor(np.tile(raw.data, (n, 1)))
    temb = ad.silu(ad.linear(temb, bundle.temb_mlp["w1"], bundle.temb_mlp["b1"]))
    temb = ad.linear(temb, bundle.temb_mlp["w2"], bundle.temb_mlp["b2"])

    skips_dn = []
    for stage in bundle.dn_enc:
        x = stage.blocks_forward(x, temb)
        skips_dn.append(x)
        x = ad.avg_pool2(x)

    x = bundle.dn_bottleneck.b0.forward(x)
    x = ad.add_channel_map(x, ad.linear(temb, bundle.dn_bottleneck.temb_w, bundle.dn_bottleneck.temb_b))
    x = ad.add(x, bn_cond)
    if bundle.fuse_spatial is not None:
        x = spatial_fusion_forward(bundle.fuse_spatial, bn_cond, x)
    x = bundle.dn_bottleneck.b1.forward(x)

    for level in range(bundle.config.depth - 1, -1, -1):
        stage = bundle.dn_dec[level]
        x = ad.conv2d(ad.upsample2(x), stage.up_w, stage.up_b, stride=1, pad=1)
        x = ad.add(x, skips_cond[level])
        if stage.fuse_channel is not None:
            x = channel_fusion_forward(stage.fuse_channel, skips_cond[level], x)
        x = ad.concat_ch([x, skips_dn[level]])
        x = stage.blocks_forward(x, temb)

    out = ad.conv2d(x, bundle.head_w, bundle.head_b, stride=1, pad=1)
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out
