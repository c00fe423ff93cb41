"""Orthonormal 2D DFT, its inverse, and a literal O((HW)^2) oracle.

The fast path is an iterative radix-2 Cooley-Tukey transform, vectorised
over every non-transformed axis. Lengths that are not powers of two fall
back to a dense DFT-matrix product along that axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, _node

ORACLE_MAX_SIZE = 4096


@dataclass(frozen=True)
class ComplexPair:
    """Real and imaginary planes of a frequency-domain signal."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise DimensionError(
                f"real {self.real.shape} and imag {self.imag.shape} differ")

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@lru_cache(maxsize=64)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=256)
def _twiddles(half: int, sign: int, dtype) -> np.ndarray:
    k = np.arange(half)
    return np.exp(sign * 2j * np.pi * k / (2 * half)).astype(dtype)


@lru_cache(maxsize=64)
def _dft_matrix(n: int, sign: int, dtype) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n).astype(dtype)


def _fft_axis(a: np.ndarray, axis: int, sign: int) -> np.ndarray:
    """Unnormalised DFT along ``axis``; sign=-1 forward, +1 inverse."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if n == 1:
        return a.copy()
    if not _is_pow2(n):
        return np.moveaxis(np.tensordot(a, _dft_matrix(n, sign, a.dtype), axes=([axis], [0])),
                           -1, axis)
    outer = int(np.prod(a.shape[:axis], dtype=np.int64))
    inner = int(np.prod(a.shape[axis + 1:], dtype=np.int64))
    # [outer, n, inner] keeps the trailing axes contiguous through every stage
    out = np.ascontiguousarray(a).reshape(outer, n, inner)[:, _bit_reverse(n), :]
    nxt = np.empty_like(out)
    size = 2
    while size <= n:
        half = size // 2
        blocks = out.reshape(outer, n // size, size, inner)
        dest = nxt.reshape(outer, n // size, size, inner)
        even = blocks[:, :, :half, :]
        odd = blocks[:, :, half:, :]
        if half > 1:
            odd = odd * _twiddles(half, sign, a.dtype)[:, None]
        np.add(even, odd, out=dest[:, :, :half, :])
        np.subtract(even, odd, out=dest[:, :, half:, :])
        out, nxt = nxt, out
        size *= 2
    return out.reshape(a.shape)


def _complex_dtype(real_dtype) -> type:
    return np.complex128 if real_dtype == np.float64 else np.complex64


def fft2(a: np.ndarray, axes=(-2, -1), inverse: bool = False) -> np.ndarray:
    """Orthonormal complex 2D DFT of a numpy array over ``axes``."""
    if not np.iscomplexobj(a):
        a = a.astype(_complex_dtype(a.dtype))
    sign = 1 if inverse else -1
    h, w = a.shape[axes[0]], a.shape[axes[1]]
    out = _fft_axis(_fft_axis(a, axes[0], sign), axes[1], sign)
    out *= 1.0 / np.sqrt(h * w)
    return out


def _spatial_axes(ndim: int) -> tuple[int, int]:
    if ndim < 2:
        raise DimensionError("need at least two axes for a 2D transform")
    # [H, W] is treated as a single plane, anything longer as [..., H, W, C]
    return (0, 1) if ndim == 2 else (ndim - 3, ndim - 2)


def dft2d(x: Tensor, axes: tuple[int, int] | None = None) -> ComplexPair:
    """Orthonormal forward transform, one plane per channel.

    Input is [H, W] or channel-last [..., H, W, C].
    """
    axes = _spatial_axes(x.ndim) if axes is None else axes
    rdt = x.dtype
    spec = fft2(x.data, axes)

    def back_spectrum(g):
        # g = gR + i*gI; the adjoint of x -> (Re F x, Im F x) is Re(F^H g)
        return (np.real(fft2(g, axes, inverse=True)).astype(rdt),)

    # hidden complex node so both planes share one adjoint transform
    joint = _node(spec, (x,), back_spectrum, "dft2d")
    real = _node(np.ascontiguousarray(spec.real), (joint,), lambda g: (g,), "dft2d.real")
    imag = _node(np.ascontiguousarray(spec.imag), (joint,), lambda g: (1j * g,), "dft2d.imag")
    return ComplexPair(real, imag)


def idft2d(f: ComplexPair, axes: tuple[int, int] | None = None) -> Tensor:
    """Real part of the orthonormal inverse transform."""
    re, im = f.real, f.imag
    axes = _spatial_axes(re.ndim) if axes is None else axes
    z = re.data + 1j * im.data
    out = np.real(fft2(z, axes, inverse=True)).astype(re.dtype)

    def backward(g):
        # out = Re(G) R - Im(G) I with G the inverse DFT matrix
        fg = fft2(g, axes, inverse=True)
        return np.real(fg).astype(re.dtype), -np.imag(fg).astype(re.dtype)

    return _node(np.ascontiguousarray(out), (re, im), backward, "idft2d")


def idft2d_imag_residue(f: ComplexPair, axes: tuple[int, int] | None = None) -> float:
    """Largest imaginary magnitude discarded by ``idft2d``."""
    axes = _spatial_axes(f.real.ndim) if axes is None else axes
    z = fft2(f.real.data + 1j * f.imag.data, axes, inverse=True)
    return float(np.abs(np.imag(z)).max())


def amplitude_phase(f: ComplexPair) -> tuple[Tensor, Tensor]:
    """Magnitude and full-quadrant phase (radians) of each bin."""
    r, i = f.real.data, f.imag.data
    return Tensor(np.hypot(r, i), dtype=r.dtype), Tensor(np.arctan2(i, r), dtype=r.dtype)


def naive_dft_oracle(x, inverse: bool = False, imag=None) -> ComplexPair:
    """Direct double-sum evaluation of the orthonormal 2D DFT in float64.

    ``x`` is an [H, W] plane (real part); ``imag`` optionally supplies the
    imaginary part. Refuses inputs with more than 4096 samples.
    """
    re = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if re.ndim != 2:
        raise DimensionError(f"oracle takes a single [H, W] plane, got {re.shape}")
    h, w = re.shape
    if h * w > ORACLE_MAX_SIZE:
        raise ContractError(f"oracle is quadratic; {h}x{w} exceeds {ORACLE_MAX_SIZE} samples")
    im = np.zeros_like(re) if imag is None else np.asarray(
        imag.data if isinstance(imag, Tensor) else imag, dtype=np.float64)
    sign = 1.0 if inverse else -1.0
    scale = 1.0 / np.sqrt(h * w)
    hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out_re = np.zeros((h, w))
    out_im = np.zeros((h, w))
    for u in range(h):
        for v in range(w):
            ang = sign * 2.0 * np.pi * (hh * u / h + ww * v / w)
            c, s = np.cos(ang), np.sin(ang)
            out_re[u, v] = np.sum(re * c - im * s) * scale
            out_im[u, v] = np.sum(re * s + im * c) * scale
    return ComplexPair(Tensor(out_re, dtype=np.float64), Tensor(out_im, dtype=np.float64))
