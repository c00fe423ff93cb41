"""Dense float tensors with a reverse-mode differentiation tape.

Every op builds a node holding its inputs and a closure that pushes the
output gradient back to them. ``Tensor.backward`` walks the graph in
reverse topological order. Data is float32 unless float64 is requested
explicitly (gradient checks run in double precision).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def detect_nonfinite():
    """Raise FloatingPointError as soon as an op produces NaN or Inf."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    return arr.astype(np.float32 if dtype is None else dtype, copy=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- metadata -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- tape ---------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _lift_pair(a, b) -> tuple[Tensor, Tensor]:
    """Constants take the float dtype of the tensor operand, so 1/6 stays exact in float64."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return _lift(a), _lift(b)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the derivative at exactly 0 is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ContractError(f"slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


# -- reductions and shape ops -----------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.asarray(x.data[idx]), (x,), backward, "slice")


def concatenate(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concatenate([expand_dims(_lift(x), axis) for x in xs], axis=axis)


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _node(np.broadcast_to(x.data, shape), (x,),
                 lambda g: (_unbroadcast(g, x.shape),), "broadcast")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    return x / sqrt(tsum(square(x), axis=axis, keepdims=True))


# -- convolutions and normalisation -------------------------------------------

def depthwise_conv3x3(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 3x3 cross-correlation with zero padding on [..., H, W, C]."""
    if x.ndim < 3:
        raise DimensionError(f"expected [..., H, W, C], got {x.shape}")
    c = x.shape[-1]
    if kernels.shape != (3, 3, c) or bias.shape != (c,):
        raise DimensionError(
            f"kernels {kernels.shape} / bias {bias.shape} do not match {c} channels")
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x.data, pad)
    k = kernels.data
    out = np.empty_like(x.data)
    out[...] = bias.data
    for dy in range(3):
        for dx in range(3):
            out += xp[..., dy:dy + h, dx:dx + w, :] * k[dy, dx]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k)
        lead = tuple(range(g.ndim - 1))
        for dy in range(3):
            for dx in range(3):
                gxp[..., dy:dy + h, dx:dx + w, :] += g * k[dy, dx]
                gk[dy, dx] = (g * xp[..., dy:dy + h, dx:dx + w, :]).sum(axis=lead)
        return gxp[..., 1:h + 1, 1:w + 1, :], gk, g.sum(axis=lead)

    return _node(out, (x, kernels, bias), backward, "dwconv3x3")


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution: the same [Cin, Cout] map applied at every position."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"weight {weight.shape} does not accept input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias {bias.shape} does not match weight {weight.shape}")
    return add(matmul(x, weight), bias)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"gamma/beta must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


# -- gradients ---------------------------------------------------------------------

def grad(root: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` for each of ``params``; unreached ones are zero."""
    params = list(params)
    for p in params:
        p.zero_grad()
    root.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def finite_diff_check(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor],
                      step: float | None = None, max_coords: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` re-evaluates the scalar loss from the current values of ``params``.
    The error per coordinate is |a - n| / (|a| + |n| + 1e-8). With
    ``max_coords`` only a seeded random subset of coordinates is probed.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    if step is None:
        step = 1e-6 if all(p.dtype == np.float64 for p in params) else 1e-3
    analytic = grad(f(), params)

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.flat
            orig = float(flat[j])
            flat[j] = orig + step
            fp = float(f().data)
            flat[j] = orig - step
            fm = float(f().data)
            flat[j] = orig
            num = (fp - fm) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[j])
            worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-8))
    return worst
