"""Finite-difference checks for every differentiable op and a few composites.

All cases run in float64 at random, non-degenerate points.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .clip_align import matching_loss
from .fourier import ComplexPair, dft2d, idft2d
from .fourierformer import (AttentionParams, BlockParams, FourierFormer, FPEConfig,
                            attention_baseline_forward, fourier_channel_evolution,
                            fourier_spatial_interaction, fpe_block_forward)
from .nn import MLP
from .tensor import Tensor, finite_diff_check

F64 = np.float64


def _t(rng, *shape, positive=False, away_from_zero=False) -> Tensor:
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    if away_from_zero:
        x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)
    return Tensor(x, requires_grad=True, dtype=F64)


def _probe(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(out * w)


def _op_cases(rng) -> dict[str, Callable[[], float]]:
    cases = {}

    def unary(name, fn, **kw):
        x = _t(rng, 3, 4, **kw)
        w = _probe(rng, fn(x).shape)
        cases[name] = lambda: finite_diff_check(lambda: _scalar(fn(x), w), [x])

    def binary(name, fn, shape_b=(3, 4), **kw):
        a, b = _t(rng, 3, 4), _t(rng, *shape_b, **kw)
        w = _probe(rng, fn(a, b).shape)
        cases[name] = lambda: finite_diff_check(lambda: _scalar(fn(a, b), w), [a, b])

    binary("add", T.add)
    binary("add_broadcast", T.add, shape_b=(4,))
    binary("sub", T.sub)
    binary("mul", T.mul)
    binary("div", T.div, positive=True)
    unary("exp", T.exp)
    unary("log", T.log, positive=True)
    unary("sqrt", T.sqrt, positive=True)
    unary("square", T.square)
    unary("abs", T.absolute, away_from_zero=True)
    unary("leaky_relu", lambda x: T.leaky_relu(x, 0.2), away_from_zero=True)
    unary("tanh", T.tanh)
    unary("sum_axis", lambda x: T.tsum(x, axis=1))
    unary("mean", lambda x: T.mean(x, axis=0, keepdims=True))
    unary("reshape", lambda x: T.reshape(x, (4, 3)))
    unary("transpose", T.transpose)
    unary("slice", lambda x: x[1:, ::2])
    unary("softmax", lambda x: T.softmax(x, axis=-1))
    unary("log_softmax", lambda x: T.log_softmax(x, axis=-1))
    unary("l2_normalize", T.l2_normalize)

    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    w = _probe(rng, (2, 3, 5))
    cases["matmul"] = lambda: finite_diff_check(lambda: _scalar(T.matmul(a, b), w), [a, b])
    c1, c2 = _t(rng, 2, 3), _t(rng, 4, 3)
    w2 = _probe(rng, (6, 3))
    cases["concatenate"] = lambda: finite_diff_check(
        lambda: _scalar(T.concatenate([c1, c2], axis=0), w2), [c1, c2])

    x, k, bias = _t(rng, 2, 5, 6, 3), _t(rng, 3, 3, 3), _t(rng, 3)
    w3 = _probe(rng, (2, 5, 6, 3))
    cases["depthwise_conv3x3"] = lambda: finite_diff_check(
        lambda: _scalar(T.depthwise_conv3x3(x, k, bias), w3), [x, k, bias])
    pw, pb = _t(rng, 3, 4), _t(rng, 4)
    w4 = _probe(rng, (2, 5, 6, 4))
    cases["pointwise_conv"] = lambda: finite_diff_check(
        lambda: _scalar(T.pointwise_conv(x, pw, pb), w4), [x, pw, pb])
    g, be = _t(rng, 3), _t(rng, 3)
    cases["layer_norm"] = lambda: finite_diff_check(
        lambda: _scalar(T.layer_norm(x, g, be), w3), [x, g, be])

    img = _t(rng, 4, 8, 2)
    wr, wi = _probe(rng, (4, 8, 2)), _probe(rng, (4, 8, 2))
    cases["dft2d"] = lambda: finite_diff_check(
        lambda: (lambda f: _scalar(f.real, wr) + _scalar(f.imag, wi))(dft2d(img)), [img])
    re, im = _t(rng, 4, 8, 2), _t(rng, 4, 8, 2)
    cases["idft2d"] = lambda: finite_diff_check(
        lambda: _scalar(idft2d(ComplexPair(re, im)), wr), [re, im])
    return cases


def _block_cases(rng) -> dict[str, Callable[[], float]]:
    cases = {}
    c = 4
    block = BlockParams.init(rng, c)
    block.astype(F64)
    x = _t(rng, 8, 8, c)
    w = _probe(rng, (8, 8, c))
    params = [x, *block.parameters()]
    cases["fourier_spatial_interaction"] = lambda: finite_diff_check(
        lambda: _scalar(fourier_spatial_interaction(x, block), w), params, max_coords=150)
    cases["fourier_channel_evolution"] = lambda: finite_diff_check(
        lambda: _scalar(fourier_channel_evolution(x, block), w), params, max_coords=150)
    cases["fpe_block"] = lambda: finite_diff_check(
        lambda: _scalar(fpe_block_forward(x, block), w), params)

    attn = AttentionParams.init(rng, 8)
    attn.astype(F64)
    tok = _t(rng, 4, 8)
    wt = _probe(rng, (4, 8))
    cases["attention_baseline"] = lambda: finite_diff_check(
        lambda: _scalar(attention_baseline_forward(tok, attn), wt), [tok, *attn.parameters()])

    texts, images = _t(rng, 5, 6), _t(rng, 5, 6)
    cases["matching_loss"] = lambda: finite_diff_check(
        lambda: matching_loss(texts, images, 0.5), [texts, images])

    mlp = MLP.init(rng, 5, 7, 2)
    mlp.astype(F64)
    xin = _t(rng, 6, 5)
    wm = _probe(rng, (6, 2))
    cases["mlp_regressor"] = lambda: finite_diff_check(
        lambda: _scalar(mlp(xin), wm), [xin, *mlp.parameters()])
    return cases


def composite_case(seed: int, channels: int = 4, size: int = 8, batch: int = 3) -> float:
    """2-block FourierFormer features pooled into a matching loss, all parameters checked.

    Pooling uses fixed random spatial weights: a plain spatial mean only sees
    the DC bin, which makes the last block's imaginary-plane parameters
    gradient-free and the relative error pure round-off.
    """
    rng = np.random.default_rng(seed)
    cfg = FPEConfig(channels=channels, blocks=2)
    ff = FourierFormer.init(rng, cfg)
    ff.astype(F64)
    x = _t(rng, batch, size, size, channels)
    texts = _t(rng, batch, channels)
    pool = rng.uniform(0.5, 1.5, size=(size, size, 1)) / (size * size)

    def loss():
        emb = T.tsum(ff(x, cfg) * pool, axis=(1, 2))
        return matching_loss(texts, emb, 0.5)

    return finite_diff_check(loss, [x, texts, *ff.parameters()], max_coords=300, seed=seed)


def run_all(seed: int = 0, points: int = 5, composite_points: int = 5) -> list[tuple[str, float]]:
    """Worst relative error per case over ``points`` random draws."""
    worst: dict[str, float] = {}
    for p in range(points):
        rng = np.random.default_rng(seed + p)
        for name, fn in {**_op_cases(rng), **_block_cases(rng)}.items():
            worst[name] = max(worst.get(name, 0.0), fn())
    results = list(worst.items())
    for i in range(composite_points):
        results.append((f"fourierformer2+matching_loss[{i}]", composite_case(seed + 100 + i)))
    return results
