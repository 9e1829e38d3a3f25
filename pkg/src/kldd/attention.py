"""Fusion blocks joining the condition and denoiser streams.

The spatial block runs single-head cross-attention over flattened pixel
tokens (queries from the denoiser stream, keys and values from the
condition stream) and adds the result back through a zero-initialized
residual scale. The channel block compares global pooled descriptors of
the two streams, derives per-channel weights from them, and mixes the
reweighted streams with two learned scalars. Both blocks are exact
identities on the denoiser stream at initialization.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _pair_4d(feat_cond: Tensor, feat_denoise: Tensor) -> tuple[Tensor, Tensor, bool]:
    squeeze = feat_cond.ndim == 3
    if squeeze:
        feat_cond = ad.reshape(feat_cond, (1,) + feat_cond.shape)
        feat_denoise = ad.reshape(feat_denoise, (1,) + feat_denoise.shape)
    if feat_cond.ndim != 4 or feat_cond.shape != feat_denoise.shape:
        raise ValueError(
            f"streams must share one (c,h,w) or (N,c,h,w) shape, got "
            f"{feat_cond.shape} and {feat_denoise.shape}"
        )
    return feat_cond, feat_denoise, squeeze


class SpatialFusionBlock:
    """Token cross-attention with a gated residual.

    Attributes:
        wq: (c, c) query projection applied to the denoiser tokens.
        wk, wv: (c, c) key/value projections applied to the condition tokens.
        wo: (c, c) output projection, bias-free.
        res_scale: scalar residual gate, zero at init.
    """

    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, res_scale: Tensor):
        c = wq.shape[0]
        for name, t in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
            if t.shape != (c, c):
                raise ValueError(f"{name} must be square ({c},{c}), got {t.shape}")
        if res_scale.shape != ():
            raise ValueError("res_scale must be a scalar")
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.res_scale = res_scale

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv,
                "wo": self.wo, "res_scale": self.res_scale}


def init_spatial_fusion(rng: np.random.Generator, channels: int) -> SpatialFusionBlock:
    std = 1.0 / np.sqrt(channels)
    mats = [Tensor(rng.normal(0.0, std, size=(channels, channels)), requires_grad=True)
            for _ in range(4)]
    scale = Tensor(np.asarray(0.0), requires_grad=True)
    return SpatialFusionBlock(*mats, scale)


def spatial_attention_map(block: SpatialFusionBlock, feat_cond: Tensor, feat_denoise: Tensor) -> Tensor:
    """The (N, h*w, h*w) row-stochastic attention matrix, for inspection."""
    feat_cond, feat_denoise, _ = _pair_4d(feat_cond, feat_denoise)
    if feat_cond.shape[1] != block.channels:
        raise ValueError(f"block built for {block.channels} channels, got {feat_cond.shape[1]}")
    q = ad.linear(ad.flatten_tokens(feat_denoise), block.wq)
    k = ad.linear(ad.flatten_tokens(feat_cond), block.wk)
    logits = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(block.channels))
    return ad.softmax(logits, axis=-1)


def spatial_fusion_forward(block: SpatialFusionBlock, feat_cond: Tensor, feat_denoise: Tensor) -> Tensor:
    """Denoiser stream plus gated attention readout of the condition stream."""
    feat_cond4, feat_denoise4, squeeze = _pair_4d(feat_cond, feat_denoise)
    if feat_cond4.shape[1] != block.channels:
        raise ValueError(f"block built for {block.channels} channels, got {feat_cond4.shape[1]}")
    _, _, h, w = feat_cond4.shape
    attn = spatial_attention_map(block, feat_cond4, feat_denoise4)
    v = ad.linear(ad.flatten_tokens(feat_cond4), block.wv)
    read = ad.linear(ad.matmul(attn, v), block.wo)
    out = ad.add(feat_denoise4, ad.mul_scalar_t(ad.tokens_to_map(read, h, w), block.res_scale))
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


class ChannelFusionBlock:
    """Descriptor cross-attention with gated channel weights.

    The two pooled descriptors pass through a shared hidden layer; its
    output becomes per-channel logits. The sigmoid of the logits is pulled
    toward 1 by a zero-initialized gate, so the weights start as exact
    ones: cw = 1 + gate * (sigmoid(logits) - 1). The reweighted streams
    combine as w1 * cond + w2 * denoise with w1 zero and w2 one at init.
    """

    def __init__(self, wq: Tensor, wk: Tensor, b1: Tensor, wo: Tensor, b2: Tensor,
                 gate: Tensor, w1: Tensor, w2: Tensor):
        c = wq.shape[1]
        s = wq.shape[0]
        if wk.shape != (s, c):
            raise ValueError(f"wk must match wq shape {(s, c)}, got {wk.shape}")
        if b1.shape != (s,) or wo.shape != (c, s) or b2.shape != (c,):
            raise ValueError("hidden/output projection shapes inconsistent")
        for name, t in (("gate", gate), ("w1", w1), ("w2", w2)):
            if t.shape != ():
                raise ValueError(f"{name} must be a scalar")
        self.wq, self.wk, self.b1, self.wo, self.b2 = wq, wk, b1, wo, b2
        self.gate, self.w1, self.w2 = gate, w1, w2

    @property
    def channels(self) -> int:
        return self.wq.shape[1]

    def params(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "b1": self.b1, "wo": self.wo,
                "b2": self.b2, "gate": self.gate, "w1": self.w1, "w2": self.w2}


def init_channel_fusion(rng: np.random.Generator, channels: int) -> ChannelFusionBlock:
    std = 1.0 / np.sqrt(channels)
    wq = Tensor(rng.normal(0.0, std, size=(channels, channels)), requires_grad=True)
    wk = Tensor(rng.normal(0.0, std, size=(channels, channels)), requires_grad=True)
    b1 = Tensor(np.zeros(channels), requires_grad=True)
    wo = Tensor(rng.normal(0.0, std, size=(channels, channels)), requires_grad=True)
    b2 = Tensor(np.zeros(channels), requires_grad=True)
    gate = Tensor(np.asarray(0.0), requires_grad=True)
    w1 = Tensor(np.asarray(0.0), requires_grad=True)
    w2 = Tensor(np.asarray(1.0), requires_grad=True)
    return ChannelFusionBlock(wq, wk, b1, wo, b2, gate, w1, w2)


def channel_descriptors(feat_cond: Tensor, feat_denoise: Tensor) -> tuple[Tensor, Tensor]:
    """(N,C) pooled descriptors: max over the condition, mean over the denoiser."""
    feat_cond, feat_denoise, _ = _pair_4d(feat_cond, feat_denoise)
    return ad.global_max_pool(feat_cond), ad.global_avg_pool(feat_denoise)


def channel_weights(block: ChannelFusionBlock, feat_cond: Tensor, feat_denoise: Tensor) -> Tensor:
    """Per-channel gate values (N,C); exactly one everywhere at init."""
    d_cond, d_dn = channel_descriptors(feat_cond, feat_denoise)
    hidden = ad.silu(ad.add(ad.linear(d_dn, block.wq), ad.linear(d_cond, block.wk, block.b1)))
    logits = ad.linear(hidden, block.wo, block.b2)
    shifted = ad.add_scalar(ad.sigmoid(logits), -1.0)
    return ad.add_scalar(ad.mul_scalar_t(shifted, block.gate), 1.0)


def channel_fusion_forward(block: ChannelFusionBlock, feat_cond: Tensor, feat_denoise: Tensor) -> Tensor:
    """Blend the channel-reweighted streams with the learned scalars."""
    feat_cond4, feat_denoise4, squeeze = _pair_4d(feat_cond, feat_denoise)
    if feat_cond4.shape[1] != block.channels:
        raise ValueError(f"block built for {block.channels} channels, got {feat_cond4.shape[1]}")
    cw = channel_weights(block, feat_cond4, feat_denoise4)
    mixed_cond = ad.mul_scalar_t(ad.mul_channel_map(feat_cond4, cw), block.w1)
    mixed_dn = ad.mul_scalar_t(ad.mul_channel_map(feat_denoise4, cw), block.w2)
    out = ad.add(mixed_cond, mixed_dn)
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out
