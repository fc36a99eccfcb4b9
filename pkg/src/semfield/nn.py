"""Small neural building blocks: parameters, linear/conv layers, MLPs, Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, conv2d, conv3d


class Parameter:
    """A trainable tensor plus its Adam state (first/second moments, step)."""

    __slots__ = ("value", "moment1", "moment2", "step")

    def __init__(self, data: np.ndarray):
        self.value = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.moment1 = np.zeros_like(self.value.data)
        self.moment2 = np.zeros_like(self.value.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.data.shape

    def zero_grad(self) -> None:
        self.value.grad = None


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Adaptive-moment update with bias correction. Gradients are left intact."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    beta1, beta2 = betas
    for p in params:
        grad = p.value.grad
        if grad is None:
            grad = np.zeros_like(p.value.data)
        p.step += 1
        p.moment1 = beta1 * p.moment1 + (1.0 - beta1) * grad
        p.moment2 = beta2 * p.moment2 + (1.0 - beta2) * grad * grad
        m_hat = p.moment1 / (1.0 - beta1**p.step)
        v_hat = p.moment2 / (1.0 - beta2**p.step)
        p.value.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class MlpSpec:
    """Fully-connected stack: ``widths[0]`` inputs through ``widths[-1]`` outputs."""

    widths: list[int]
    activation: str = "relu"
    final: str = "none"

    def __post_init__(self) -> None:
        if len(self.widths) < 3:
            raise ValueError("MLP needs at least one hidden layer")
        if any(w < 1 for w in self.widths):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ("relu", "softplus"):
            raise ValueError(f"unsupported activation '{self.activation}'")
        if self.final not in ("none", "softplus", "sigmoid"):
            raise ValueError(f"unsupported final activation '{self.final}'")


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.weight = Parameter(glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.weight.value) + self.bias.value

    def parameters(self) -> dict[str, Parameter]:
        return {"weight": self.weight, "bias": self.bias}


class Mlp:
    def __init__(self, rng: np.random.Generator, spec: MlpSpec):
        self.spec = spec
        self.layers = [
            Linear(rng, n_in, n_out)
            for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:])
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            last = i == len(self.layers) - 1
            act = self.spec.final if last else self.spec.activation
            if act == "relu":
                x = x.relu()
            elif act == "softplus":
                x = x.softplus()
            elif act == "sigmoid":
                x = x.sigmoid()
        return x

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for i, layer in enumerate(self.layers):
            for key, p in layer.parameters().items():
                out[f"layer{i}.{key}"] = p
        return out


class ConvLayer:
    """Odd-sized kernel, stride-1 same-padding convolution with bias."""

    def __init__(
        self,
        rng: np.random.Generator,
        kernel_size: int,
        c_in: int,
        c_out: int,
        ndim: int,
    ):
        shape = (kernel_size,) * ndim + (c_in, c_out)
        taps = kernel_size**ndim
        self.kernel = Parameter(glorot_uniform(rng, shape, taps * c_in, taps * c_out))
        self.bias = Parameter(np.zeros(c_out))
        self.padding = kernel_size // 2
        self.ndim = ndim

    def __call__(self, x: Tensor) -> Tensor:
        op = conv2d if self.ndim == 2 else conv3d
        return op(x, self.kernel.value, stride=1, padding=self.padding) + self.bias.value

    def parameters(self) -> dict[str, Parameter]:
        return {"kernel": self.kernel, "bias": self.bias}


class ConvStack:
    """conv(k)->relu chain ending in an un-activated 1x1 projection."""

    def __init__(
        self,
        rng: np.random.Generator,
        channels: Sequence[int],
        kernel_sizes: Sequence[int],
        ndim: int,
    ):
        if len(kernel_sizes) != len(channels) - 1:
            raise ValueError("need one kernel size per conv layer")
        self.layers = [
            ConvLayer(rng, k, c_in, c_out, ndim)
            for k, c_in, c_out in zip(kernel_sizes, channels[:-1], channels[1:])
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for i, layer in enumerate(self.layers):
            for key, p in layer.parameters().items():
                out[f"conv{i}.{key}"] = p
        return out
