"""SGD with momentum and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    step: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")


class SGD:
    """Classic SGD with coupled weight decay.

    Per parameter::

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v

    With ``momentum == 0`` no velocity buffers are kept and ``v`` is just the
    decayed gradient.  A parameter whose ``grad`` is ``None`` is left alone.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, no_decay: set[str] | frozenset[str] = frozenset()):
        self.params = dict(params)
        self.no_decay = set(no_decay)
        self.state = OptimState(lr=lr, momentum=momentum, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        sgd_step(self.params, self.state, self.state.lr if lr is None else lr, self.no_decay)

    def rebind(self, params: dict[str, Tensor]) -> None:
        """Point at a new parameter set (after compaction); stale velocities are dropped."""
        self.params = dict(params)
        for name in list(self.state.velocity):
            if name not in self.params or self.state.velocity[name].shape != self.params[name].shape:
                del self.state.velocity[name]


def sgd_step(params: dict[str, Tensor], state: OptimState, lr: float,
             no_decay: set[str] | frozenset[str] = frozenset()) -> None:
    """One SGD step over ``params`` using their ``.grad``; mutates data and ``state``."""
    # validate everything first so a bad gradient leaves all parameters untouched
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(name)
    for name, p in params.items():
        if p.grad is None:
            continue
        d = p.grad
        wd = 0.0 if name in no_decay else state.weight_decay
        if wd:
            d = d + wd * p.data
        if state.momentum > 0:
            v = state.velocity.get(name)
            v = d.copy() if v is None else state.momentum * v + d
            state.velocity[name] = v
            d = v
        p.data = p.data - lr * d
    state.step += 1


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to ``max_lr``, then a single cosine cycle down to 0."""

    max_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")
        if self.warmup_steps < 0 or self.total_steps <= 0 or self.warmup_steps > self.total_steps:
            raise ValueError(
                f"need 0 <= warmup_steps <= total_steps and total_steps > 0, got {self.warmup_steps}, {self.total_steps}"
            )

    def lr_at(self, step: int) -> float:
        return lr_at(self, step)


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w, t = schedule.warmup_steps, schedule.total_steps
    if step < w:
        return schedule.max_lr * step / w
    if t == w:
        return 0.0 if step == t else schedule.max_lr
    progress = (step - w) / (t - w)
    if progress == 1.0:
        return 0.0
    return schedule.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
