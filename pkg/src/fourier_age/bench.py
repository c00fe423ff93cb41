"""Wall-clock scaling of the Fourier mixer against softmax attention."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np

from .fourierformer import (AttentionParams, BlockParams, attention_baseline_forward,
                            fourier_spatial_interaction)
from .tensor import ContractError, Tensor, no_grad

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

DEFAULT_TOKENS = (256, 1024, 4096, 16384)


@dataclass
class BenchResult:
    tokens: list[int]
    fourier_times: list[float]
    attention_times: list[float]
    fourier_slope: float
    attention_slope: float
    fourier_residual: float
    attention_residual: float
    raw: dict[str, list[list[float]]] = field(default_factory=dict)

    def rows(self):
        for n, f, a in zip(self.tokens, self.fourier_times, self.attention_times):
            yield n, f, a


def loglog_slope(tokens, times) -> tuple[float, float]:
    """Least-squares slope of log(time) on log(tokens) and its RMS residual."""
    x = np.log(np.asarray(tokens, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    coef, *_ = np.linalg.lstsq(np.stack([x, np.ones_like(x)], axis=1), y, rcond=None)
    resid = y - (coef[0] * x + coef[1])
    return float(coef[0]), float(np.sqrt(np.mean(resid ** 2)))


def _median_time(fn, reps: int) -> tuple[float, list[float]]:
    fn()  # warm-up: twiddle/cache setup is not part of the measurement
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples)), samples


def benchmark_mixing(tokens=DEFAULT_TOKENS, channels: int = 16, repetitions: int = 5,
                     seed: int = 0, single_thread: bool = True) -> BenchResult:
    tokens = [int(t) for t in tokens]
    if len(tokens) < 3:
        raise ContractError("need at least three token counts")
    if repetitions < 5:
        raise ContractError("need at least five repetitions")
    for t in tokens:
        side = int(round(np.sqrt(t)))
        if t & (t - 1) or side * side != t:
            raise ContractError(f"token count {t} must be a power of two with a square grid")
    rng = np.random.default_rng(seed)
    block = BlockParams.init(rng, channels)
    attn = AttentionParams.init(rng, channels)
    limit = (threadpool_limits(limits=1) if single_thread and threadpool_limits
             else contextlib.nullcontext())
    f_times, a_times, raw = [], [], {"fourier": [], "attention": []}
    with limit, no_grad():
        for t in tokens:
            side = int(round(np.sqrt(t)))
            x = Tensor(rng.normal(size=(side, side, channels)))
            seq = x.reshape(t, channels)
            med, samples = _median_time(lambda: fourier_spatial_interaction(x, block), repetitions)
            f_times.append(med)
            raw["fourier"].append(samples)
            med, samples = _median_time(lambda: attention_baseline_forward(seq, attn), repetitions)
            a_times.append(med)
            raw["attention"].append(samples)
    fs, fr = loglog_slope(tokens, f_times)
    as_, ar = loglog_slope(tokens, a_times)
    return BenchResult(tokens, f_times, a_times, fs, as_, fr, ar, raw)
