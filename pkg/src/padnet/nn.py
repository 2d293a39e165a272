"""Module container plus the static and fully dynamic layers.

Dynamic convolution aggregates ``k`` parallel kernels with a per-sample
attention vector; the mixture of experts routes each token to its top-``n``
feed-forward experts.  Both expose their *computational* parameters as flat
vectors so the partially dynamic wrappers in :mod:`padnet.pad` can splice
static values in position by position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Minimal parameter container; attributes that are Tensors with
    ``requires_grad`` are parameters, Modules are children."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _kaiming(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored ``[in, out]``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _param(_uniform(rng, in_features, (in_features, out_features)))
        self.bias = _param(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    """Static convolution; the baseline every dynamic layer reduces to."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = _param(_kaiming(rng, fan_in, (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = _param(np.zeros(out_channels)) if bias else None

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    def __call__(self, x: Tensor, tau: float | None = None) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def computational_params(self, x: Tensor, tau: float | None = None) -> Tensor:
        """The weight every sample sees, broadcast to ``[B, m]``."""
        flat = T.reshape(self.weight, (1, -1))
        return T.broadcast_to(flat, (x.shape[0], flat.shape[1]))


class KernelAttention(Module):
    """Squeeze-and-excitation style block: pool -> reduce -> relu -> expand to ``k`` logits."""

    def __init__(self, in_channels: int, k: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or max(k, in_channels // 4)
        self.hidden = hidden
        self.fc1 = Linear(in_channels, hidden, rng)
        self.fc2 = Linear(hidden, k, rng)

    def logits(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(T.global_avg_pool(x))))

    def __call__(self, x: Tensor, tau: float) -> Tensor:
        return T.softmax(self.logits(x), axis=-1, temperature=tau)


class DyConv2d(Module):
    """Dynamic convolution: each sample is convolved with ``sum_i pi_i(x) * kernel_i``."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, k: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0, bias: bool = True,
                 attention_hidden: int | None = None):
        if k < 1:
            raise ValueError(f"kernel count k must be positive, got {k}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding, self.k = kernel_size, stride, padding, k
        fan_in = in_channels * kernel_size * kernel_size
        self.kernels = _param(_kaiming(rng, fan_in, (k, out_channels, in_channels, kernel_size, kernel_size)))
        self.biases = _param(np.zeros((k, out_channels))) if bias else None
        self.attention = KernelAttention(in_channels, k, rng, attention_hidden)

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    @property
    def m(self) -> int:
        return int(np.prod(self.kernel_shape))

    def attend(self, x: Tensor, tau: float) -> Tensor:
        """Attention weights ``[B, k]`` over the kernels."""
        if not tau > 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"DyConv2d expects [B, {self.in_channels}, H, W], got {x.shape}")
        return self.attention(x, tau)

    def aggregate(self, pi: Tensor) -> Tensor:
        """Per-sample aggregated kernels, flattened to ``[B, m]``."""
        return pi @ T.reshape(self.kernels, (self.k, self.m))

    def aggregate_bias(self, pi: Tensor) -> Tensor | None:
        return pi @ self.biases if self.biases is not None else None

    def computational_params(self, x: Tensor, tau: float, pi: Tensor | None = None) -> Tensor:
        pi = self.attend(x, tau) if pi is None else pi
        return self.aggregate(pi)

    def convolve(self, x: Tensor, flat_kernels: Tensor, bias: Tensor | None) -> Tensor:
        w = T.reshape(flat_kernels, (x.shape[0],) + self.kernel_shape)
        return T.conv2d(x, w, bias, self.stride, self.padding)

    def __call__(self, x: Tensor, tau: float) -> Tensor:
        pi = self.attend(x, tau)
        return self.convolve(x, self.aggregate(pi), self.aggregate_bias(pi))


@dataclass(frozen=True)
class TemperaturePlan:
    """Linear softmax-temperature annealing, clamped at ``end`` after ``anneal_epochs``."""

    start: float = 30.0
    end: float = 1.0
    anneal_epochs: float = 10

    def __post_init__(self):
        if not (self.start > 0 and self.end > 0):
            raise ValueError("temperatures must be positive")
        if self.anneal_epochs < 0:
            raise ValueError("anneal_epochs must be non-negative")

    def at(self, epoch: float) -> float:
        return temperature_at(self, epoch)


def temperature_at(plan: TemperaturePlan, epoch: float) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if epoch >= plan.anneal_epochs:
        return plan.end
    return plan.start + (plan.end - plan.start) * (epoch / plan.anneal_epochs)


class FeedForward(Module):
    """Two-layer expert ``relu(x @ w1 + b1) @ w2 + b2``; also the static MoE counterpart."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.dim, self.hidden = dim, hidden
        self.w1 = _param(_uniform(rng, dim, (dim, hidden)))
        self.b1 = _param(np.zeros(hidden))
        self.w2 = _param(_uniform(rng, hidden, (hidden, dim)))
        self.b2 = _param(np.zeros(dim))

    @property
    def m(self) -> int:
        return 2 * self.dim * self.hidden

    def __call__(self, x: Tensor, tau: float | None = None) -> Tensor:
        return T.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def flat_weights(self) -> Tensor:
        return T.concat([T.reshape(self.w1, (-1,)), T.reshape(self.w2, (-1,))])


@dataclass
class Routing:
    indices: np.ndarray  # [T, n] selected experts, best first
    weights: Tensor  # [T, n] renormalised gate scores
    probs: Tensor  # [T, m] full softmax gate scores


class MoE(Module):
    """Top-``n`` of ``m`` mixture of two-layer experts, gated per token.

    Expert weights are stored stacked: ``w1 [m, d, h]``, ``w2 [m, h, d]``.
    ``shared`` initialisation gives every expert the same starting weights,
    the way experts are upcycled from one pretrained feed-forward block.
    """

    def __init__(self, dim: int, hidden: int, experts: int, top: int, rng: np.random.Generator,
                 init: str = "shared", jitter: float = 0.0):
        if not 0 < top < experts:
            raise ValueError(f"need 0 < n < m for top-n routing, got n={top}, m={experts}")
        self.dim, self.hidden, self.experts, self.top = dim, hidden, experts, top
        if init == "shared":
            base = FeedForward(dim, hidden, rng)
            w1 = np.repeat(base.w1.data[None], experts, axis=0)
            w2 = np.repeat(base.w2.data[None], experts, axis=0)
        elif init == "independent":
            w1 = _uniform(rng, dim, (experts, dim, hidden))
            w2 = _uniform(rng, hidden, (experts, hidden, dim))
        else:
            raise ValueError(f"unknown expert init {init!r}")
        if jitter:
            w1 = w1 + jitter * rng.normal(size=w1.shape) / np.sqrt(dim)
            w2 = w2 + jitter * rng.normal(size=w2.shape) / np.sqrt(hidden)
        self.w1 = _param(w1)
        self.b1 = _param(np.zeros((experts, hidden)))
        self.w2 = _param(w2)
        self.b2 = _param(np.zeros((experts, dim)))
        self.gate = _param(_uniform(rng, dim, (dim, experts)))
        # copy of the common starting point; the static branch of a PAD wrapper starts here
        self._init_flat = np.concatenate([w1[0].reshape(-1), w2[0].reshape(-1)]) if init == "shared" else None

    @property
    def m(self) -> int:
        """Computational-parameter count of one expert's weight matrices."""
        return 2 * self.dim * self.hidden

    def route(self, x: Tensor) -> Routing:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"MoE expects tokens [T, {self.dim}], got {x.shape}")
        probs = T.softmax(x @ self.gate, axis=-1)
        idx = T.topk_indices(probs.data, self.top)
        chosen = T.take_along_axis(probs, idx, axis=-1)
        weights = chosen / T.sum_(chosen, axis=-1, keepdims=True)
        return Routing(idx, weights, probs)

    def expert_weights(self) -> tuple[Tensor, Tensor]:
        return self.w1, self.w2

    def flat_expert_weights(self) -> Tensor:
        """``[m_experts, m]`` stacked flat weights of each expert."""
        e = self.experts
        return T.concat([T.reshape(self.w1, (e, -1)), T.reshape(self.w2, (e, -1))], axis=1)

    def unflatten(self, flat: Tensor) -> tuple[Tensor, Tensor]:
        e, d, h = flat.shape[0], self.dim, self.hidden
        w1 = T.reshape(T.take(flat, np.arange(d * h), axis=1), (e, d, h))
        w2 = T.reshape(T.take(flat, np.arange(d * h, 2 * d * h), axis=1), (e, h, d))
        return w1, w2

    def mix(self, x: Tensor, routing: Routing, w1: Tensor, w2: Tensor) -> Tensor:
        """Weighted sum of the selected experts' outputs.

        All experts are evaluated densely; unselected ones carry exactly zero
        weight, so outputs and gradients match sparse dispatch.
        """
        dispatch = T.scatter_along_axis(routing.weights, routing.indices, self.experts, axis=-1)  # [T, m]
        h = T.relu(T.matmul(T.reshape(x, (1,) + x.shape), w1) + T.reshape(self.b1, (self.experts, 1, -1)))
        y = T.matmul(h, w2) + T.reshape(self.b2, (self.experts, 1, -1))  # [m, T, d]
        gate = T.reshape(T.transpose(dispatch, (1, 0)), (self.experts, x.shape[0], 1))
        return T.sum_(gate * y, axis=0)

    def computational_params(self, x: Tensor, routing: Routing | None = None) -> Tensor:
        """Per-token gate-weighted expert weights ``[T, m]``."""
        routing = self.route(x) if routing is None else routing
        dispatch = T.scatter_along_axis(routing.weights, routing.indices, self.experts, axis=-1)
        return dispatch @ self.flat_expert_weights()

    def __call__(self, x: Tensor, tau: float | None = None) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = T.reshape(x, (1, -1))
        routing = self.route(x)
        out = self.mix(x, routing, self.w1, self.w2)
        return T.reshape(out, (-1,)) if squeeze else out
