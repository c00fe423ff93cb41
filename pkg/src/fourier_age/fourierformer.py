"""Fourier prior embedding (FPE) blocks and an attention baseline.

An FPE block mixes tokens in the frequency domain instead of with
attention. Spatial interaction filters each channel's spectrum with a
depthwise 3x3 convolution; channel evolution mixes channels per frequency
with a 1x1 convolution. Both run separately on the real and imaginary
planes and return to the spatial domain through the inverse DFT.

Layout is channel-last: [..., H, W, C].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fourier import ComplexPair, dft2d, idft2d
from .nn import LayerNorm, Linear, ParamSet, normal, param, zeros
from .tensor import DimensionError, Tensor


@dataclass
class FPEConfig:
    channels: int = 64
    blocks: int = 2
    leaky_slope: float = 0.2
    eps: float = 1e-5
    spatial_interaction: bool = True
    channel_evolution: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")


@dataclass
class BlockParams(ParamSet):
    dw_real_k: Tensor
    dw_real_b: Tensor
    dw_imag_k: Tensor
    dw_imag_b: Tensor
    pw_real_w: Tensor
    pw_real_b: Tensor
    pw_imag_w: Tensor
    pw_imag_b: Tensor
    norm_si: LayerNorm
    pre_si: LayerNorm
    pre_ce: LayerNorm

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "BlockParams":
        c = channels
        # centre-heavy kernels start close to an all-pass filter
        def kernel():
            k = rng.normal(0.0, 0.1, size=(3, 3, c))
            k[1, 1] += 1.0
            return param(k)

        pw_std = 1.0 / np.sqrt(c)
        return cls(
            kernel(), zeros((c,)), kernel(), zeros((c,)),
            normal(rng, (c, c), pw_std), zeros((c,)),
            normal(rng, (c, c), pw_std), zeros((c,)),
            LayerNorm.init(c), LayerNorm.init(c), LayerNorm.init(c),
        )

    @classmethod
    def zero(cls, channels: int) -> "BlockParams":
        c = channels
        return cls(
            zeros((3, 3, c)), zeros((c,)), zeros((3, 3, c)), zeros((c,)),
            zeros((c, c)), zeros((c,)), zeros((c, c)), zeros((c,)),
            LayerNorm.init(c), LayerNorm.init(c), LayerNorm.init(c),
        )

    @property
    def channels(self) -> int:
        return self.pw_real_w.shape[0]


def _check_channels(x: Tensor, params: BlockParams) -> None:
    if x.ndim < 3 or x.shape[-1] != params.channels:
        raise DimensionError(f"input {x.shape} does not match {params.channels} channels")


def fourier_spatial_interaction(x: Tensor, params: BlockParams, slope: float = 0.2,
                                activation: bool = True, normalize: bool = True,
                                eps: float = 1e-5) -> Tensor:
    _check_channels(x, params)
    spec = dft2d(x)
    s_real = T.depthwise_conv3x3(spec.real, params.dw_real_k, params.dw_real_b)
    s_imag = T.depthwise_conv3x3(spec.imag, params.dw_imag_k, params.dw_imag_b)
    if activation:
        s_real = T.leaky_relu(s_real, slope)
        s_imag = T.leaky_relu(s_imag, slope)
    out = idft2d(ComplexPair(s_real, s_imag))
    if normalize:
        out = params.norm_si(out, eps)
    return out


def fourier_channel_evolution(x: Tensor, params: BlockParams, slope: float = 0.2,
                              activation: bool = True) -> Tensor:
    _check_channels(x, params)
    spec = dft2d(x)
    c_real = T.pointwise_conv(spec.real, params.pw_real_w, params.pw_real_b)
    c_imag = T.pointwise_conv(spec.imag, params.pw_imag_w, params.pw_imag_b)
    if activation:
        c_real = T.leaky_relu(c_real, slope)
        c_imag = T.leaky_relu(c_imag, slope)
    return idft2d(ComplexPair(c_real, c_imag))


def fpe_block_forward(x: Tensor, params: BlockParams, config: FPEConfig | None = None) -> Tensor:
    """Pre-norm residual block: spatial interaction, then channel evolution."""
    cfg = config or FPEConfig(channels=params.channels)
    y = x
    if cfg.spatial_interaction:
        y = y + fourier_spatial_interaction(params.pre_si(y, cfg.eps), params,
                                            cfg.leaky_slope, eps=cfg.eps)
    if cfg.channel_evolution:
        y = y + fourier_channel_evolution(params.pre_ce(y, cfg.eps), params, cfg.leaky_slope)
    return y


def fourierformer_forward(x: Tensor, blocks: list[BlockParams],
                          config: FPEConfig | None = None) -> Tensor:
    for b in blocks:
        x = fpe_block_forward(x, b, config)
    return x


@dataclass
class FourierFormer(ParamSet):
    blocks: list[BlockParams] = field(default_factory=list)

    @classmethod
    def init(cls, rng: np.random.Generator, config: FPEConfig) -> "FourierFormer":
        return cls([BlockParams.init(rng, config.channels) for _ in range(config.blocks)])

    def __call__(self, x: Tensor, config: FPEConfig | None = None) -> Tensor:
        return fourierformer_forward(x, self.blocks, config)


# -- quadratic baseline -------------------------------------------------------------

@dataclass
class AttentionParams(ParamSet):
    q: Linear
    k: Linear
    v: Linear
    norm: LayerNorm

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int) -> "AttentionParams":
        # a key bias shifts every score in a row equally, so softmax ignores it
        return cls(Linear.init(rng, dim, dim), Linear.init(rng, dim, dim, bias=False),
                   Linear.init(rng, dim, dim), LayerNorm.init(dim))


def attention_baseline_forward(tokens: Tensor, params: AttentionParams,
                               chunk: int = 2048) -> Tensor:
    """Single-head softmax attention, pre-norm with residual, on [..., T, D].

    Queries are processed ``chunk`` rows at a time so the T x T score matrix
    is never held in full; the arithmetic is unchanged.
    """
    d = tokens.shape[-1]
    if params.q.weight.shape != (d, d):
        raise DimensionError(f"attention width {params.q.weight.shape} vs tokens {tokens.shape}")
    h = params.norm(tokens)
    q, k, v = params.q(h), params.k(h), params.v(h)
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scale = 1.0 / np.sqrt(d)
    n = tokens.shape[-2]
    outs = []
    for start in range(0, n, chunk):
        qs = q if n <= chunk else q[..., start:start + chunk, :]
        scores = T.matmul(qs, kt) * scale
        outs.append(T.matmul(T.softmax(scores, axis=-1), v))
    mixed = outs[0] if len(outs) == 1 else T.concatenate(outs, axis=-2)
    return tokens + mixed
