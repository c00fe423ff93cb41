"""Parameter containers and small building blocks shared by the models."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


def zeros(shape) -> Tensor:
    return param(np.zeros(shape))


def ones(shape) -> Tensor:
    return param(np.ones(shape))


class ParamSet:
    """Mixin for dataclasses whose fields are Tensors, ParamSets or lists of them."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            yield from _walk(getattr(self, f.name), prefix + f.name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise T.DimensionError(f"{k}: stored {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def astype(self, dtype) -> None:
        """Cast every parameter in place (float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name: str):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, ParamSet):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


@dataclasses.dataclass
class Linear(ParamSet):
    weight: Tensor
    bias: Tensor | None

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, std: float | None = None,
             zero: bool = False, bias: bool = True) -> "Linear":
        b = zeros((n_out,)) if bias else None
        if zero:
            return cls(zeros((n_in, n_out)), b)
        std = 1.0 / np.sqrt(n_in) if std is None else std
        return cls(normal(rng, (n_in, n_out), std), b)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return self(T.reshape(x, (1, -1))).reshape(-1)
        out = T.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


@dataclasses.dataclass
class LayerNorm(ParamSet):
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, n: int) -> "LayerNorm":
        return cls(ones((n,)), zeros((n,)))

    def __call__(self, x: Tensor, eps: float = 1e-5) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps)


@dataclasses.dataclass
class MLP(ParamSet):
    """Two-layer perceptron with a LeakyReLU hidden layer."""

    hidden: Linear
    out: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int,
             zero_out: bool = False) -> "MLP":
        return cls(Linear.init(rng, n_in, n_hidden),
                   Linear.init(rng, n_hidden, n_out, zero=zero_out))

    def __call__(self, x: Tensor, slope: float = 0.2) -> Tensor:
        return self.out(T.leaky_relu(self.hidden(x), slope))
