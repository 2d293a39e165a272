"""Partially dynamic layers.

A PAD layer keeps the dynamic factors of a fully dynamic layer plus one static
value per computational parameter, and a binary mask choosing between them::

    theta_hat[j] = lam_d * theta_dyn[j]     if mask[j] == 1
                   lam_s * theta_static[j]  otherwise

with ``lam_s + lam_d = 2`` in the default scale mode.  Once the mask is final,
:meth:`compact` drops dynamic-factor entries at static positions and static
entries at dynamic positions without changing any output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import DyConv2d, Module, MoE
from .tensor import ShapeError, Tensor

SCALE_MODES = ("none", "static-only", "dynamic-only", "both-free", "sum-2")
PAD_MODES = ("pad", "prune")


class CompactionError(RuntimeError):
    pass


@dataclass
class IndicatorMask:
    """Binary vector over a layer's computational parameters; 1 = dynamic."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1:
            raise ValueError(f"mask must be a vector, got shape {bits.shape}")
        if bits.dtype != bool:
            if not np.isin(bits, (0, 1)).all():
                raise ValueError("mask entries must be 0 or 1")
            bits = bits.astype(bool)
        self.bits = bits

    @classmethod
    def ones(cls, m: int) -> IndicatorMask:
        return cls(np.ones(m, dtype=bool))

    @classmethod
    def zeros(cls, m: int) -> IndicatorMask:
        return cls(np.zeros(m, dtype=bool))

    @property
    def m(self) -> int:
        return self.bits.size

    @property
    def dynamic_count(self) -> int:
        return int(self.bits.sum())

    @property
    def dynamic_ratio(self) -> float:
        return self.dynamic_count / self.m if self.m else 0.0

    def as_float(self) -> np.ndarray:
        return self.bits.astype(T.get_default_dtype())

    def pack(self) -> bytes:
        return np.packbits(self.bits.astype(np.uint8), bitorder="little").tobytes()

    @classmethod
    def unpack(cls, data: bytes, m: int) -> IndicatorMask:
        raw = np.frombuffer(data, dtype=np.uint8)
        if raw.size != (m + 7) // 8:
            raise ValueError(f"packed mask holds {raw.size} bytes, expected {(m + 7) // 8} for m={m}")
        return cls(np.unpackbits(raw, bitorder="little", count=m).astype(bool))

    def copy(self) -> IndicatorMask:
        return IndicatorMask(self.bits.copy())


def keep_count(kappa: float, m: int) -> int:
    """``ceil(kappa * m)``, immune to products like ``0.3 * 10 = 3.0000000000000004``."""
    return min(m, math.ceil(round(kappa * m, 9)))


def lambda_pair(theta: float) -> tuple[float, float]:
    """``(lam_s, lam_d)`` for the constrained parametrisation ``lam_d = 2 sigmoid(theta)``."""
    lam_d = 2.0 / (1.0 + math.exp(-theta)) if theta > -700 else 0.0
    return 2.0 - lam_d, lam_d


class ScaleFactors(Module):
    """Trainable intensities of the static and dynamic branches.

    ``sum-2`` stores one unconstrained scalar and derives
    ``lam_d = 2 sigmoid(theta)``, ``lam_s = 2 - lam_d`` so the sum is 2 by
    construction.  The free modes store plain scalars initialised at 1.
    """

    def __init__(self, mode: str = "sum-2"):
        if mode not in SCALE_MODES:
            raise ValueError(f"unknown scale mode {mode!r}; choose from {SCALE_MODES}")
        self.mode = mode
        self.theta = Tensor(np.zeros(1), requires_grad=True) if mode == "sum-2" else None
        self.lam_s = Tensor(np.ones(1), requires_grad=True) if mode in ("static-only", "both-free") else None
        self.lam_d = Tensor(np.ones(1), requires_grad=True) if mode in ("dynamic-only", "both-free") else None

    def tensors(self) -> tuple[Tensor | float, Tensor | float]:
        if self.mode == "sum-2":
            lam_d = T.scale(T.sigmoid(self.theta), 2.0)
            return T.sub(2.0, lam_d), lam_d
        return (self.lam_s if self.lam_s is not None else 1.0,
                self.lam_d if self.lam_d is not None else 1.0)

    def values(self) -> tuple[float, float]:
        if self.mode == "sum-2":
            return lambda_pair(float(self.theta.data[0]))
        s, d = self.tensors()
        return (float(s.data[0]) if isinstance(s, Tensor) else s,
                float(d.data[0]) if isinstance(d, Tensor) else d)


def assemble(dynamic, static, mask, lam_d=1.0, lam_s=None) -> Tensor:
    """Computational parameters from the two branches.

    ``lam_s`` defaults to ``2 - lam_d``.  ``mask`` may be a float tensor with
    ``requires_grad`` so the derivative of the loss in each mask entry can be
    read back.
    """
    dynamic, static, mask = T.as_tensor(dynamic), T.as_tensor(static), T.as_tensor(mask)
    m = mask.shape[-1]
    if dynamic.shape[-1] != m or static.shape[-1] != m:
        raise ShapeError(
            f"assemble: lengths differ, dynamic {dynamic.shape}, static {static.shape}, mask {mask.shape}"
        )
    if lam_s is None:
        lam_s = T.sub(2.0, lam_d) if isinstance(lam_d, Tensor) else 2.0 - lam_d
    dyn = dynamic if _is_one(lam_d) else T.mul(lam_d, dynamic)
    stat = static if _is_one(lam_s) else T.mul(lam_s, static)
    return T.add(T.mul(mask, dyn), T.mul(T.sub(1.0, mask), stat))


def _is_one(x) -> bool:
    return not isinstance(x, Tensor) and x == 1.0


@dataclass
class CompactionReport:
    layer: str
    m: int
    dynamic_count: int
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int


class _PadBase(Module):
    """Shared mask / static / compaction logic; subclasses bind the inner layer."""

    def _setup(self, m: int, n_factors: int, static_init: np.ndarray | None, scale_mode: str, mode: str):
        if mode not in PAD_MODES:
            raise ValueError(f"unknown PAD mode {mode!r}")
        self.mode = mode
        self._n_factors = n_factors
        self._mask = IndicatorMask.ones(m)
        self._relaxed: Tensor | None = None
        self._perm: np.ndarray | None = None
        if mode == "pad":
            self.static = Tensor(np.array(static_init, dtype=T.get_default_dtype()), requires_grad=True)
            self.scales = ScaleFactors(scale_mode)
        else:
            # pruning zeroes unkept positions and has no intensities to learn
            self.static = None
            self.scales = ScaleFactors("none")
        self.factors_dyn: Tensor | None = None
        self.static_vals: Tensor | None = None

    # -- mask -------------------------------------------------------------
    @property
    def m(self) -> int:
        return self._mask.m

    @property
    def mask(self) -> IndicatorMask:
        return self._mask

    @property
    def compacted(self) -> bool:
        return self._perm is not None

    def set_mask(self, mask: IndicatorMask) -> None:
        if self.compacted:
            raise CompactionError("mask is frozen once the layer is compacted")
        if mask.m != self.m:
            raise ShapeError(f"mask length {mask.m} != layer parameter count {self.m}")
        self._mask = mask.copy()

    def relax_mask(self) -> Tensor:
        """Swap in a real-valued, differentiable copy of the mask and return it."""
        if self.compacted:
            raise CompactionError("cannot relax the mask of a compacted layer")
        self._relaxed = Tensor(self._mask.as_float(), requires_grad=True)
        return self._relaxed

    def harden_mask(self) -> None:
        self._relaxed = None

    def _mask_tensor(self) -> Tensor:
        return self._relaxed if self._relaxed is not None else Tensor(self._mask.as_float())

    # -- assembly -----------------------------------------------------------
    def _assemble(self, dynamic: Tensor) -> Tensor:
        """``dynamic`` is ``[..., m]`` when uncompacted, ``[..., dynamic_count]`` when compacted."""
        lam_s, lam_d = self.scales.tensors()
        if not self.compacted:
            if self.mode == "prune":
                return T.mul(self._mask_tensor(), dynamic)
            return assemble(dynamic, T.reshape(self.static, (1, -1)), self._mask_tensor(), lam_d, lam_s)
        lead = dynamic.shape[:-1]
        n_static = self.m - self._mask.dynamic_count
        dyn = dynamic if _is_one(lam_d) else T.mul(lam_d, dynamic)
        if self.mode == "prune":
            stat = Tensor(np.zeros(lead + (n_static,)))
        else:
            stat = self.static_vals if _is_one(lam_s) else T.mul(lam_s, self.static_vals)
            stat = T.broadcast_to(T.reshape(stat, (1,) * len(lead) + (n_static,)), lead + (n_static,))
        return T.take(T.concat([dyn, stat], axis=-1), self._perm, axis=-1)

    # -- partition support ----------------------------------------------------
    def dynamic_snapshot(self) -> np.ndarray:
        """Current value a position would freeze to (subclass-specific)."""
        raise NotImplementedError

    def freeze(self, new_mask: IndicatorMask) -> None:
        """Adopt ``new_mask``; positions leaving dynamic mode take the current snapshot."""
        if new_mask.m != self.m:
            raise ShapeError(f"mask length {new_mask.m} != {self.m}")
        if np.any(new_mask.bits & ~self._mask.bits):
            raise ValueError("freeze cannot return static positions to dynamic mode")
        newly_static = self._mask.bits & ~new_mask.bits
        if self.mode == "pad" and newly_static.any():
            snap = self.dynamic_snapshot()
            self.static.data = self.static.data.copy()
            self.static.data[newly_static] = snap[newly_static]
        self.set_mask(new_mask)

    # -- compaction -----------------------------------------------------------
    def _aux_count(self) -> int:
        raise NotImplementedError

    def _generation_macs(self, dynamic_count: int) -> int:
        raise NotImplementedError

    def stored_counts(self) -> dict[str, int]:
        """Stored scalars, itemised: dynamic factors, static values, auxiliary."""
        m, dc, k = self.m, self._mask.dynamic_count, self._n_factors
        if self.compacted:
            factors = k * dc
            static = 0 if self.mode == "prune" else m - dc
        else:
            factors = k * m
            static = 0 if self.mode == "prune" else m
        return {"factors": factors, "static": static, "auxiliary": self._aux_count()}

    def _compact_factors(self, dyn_idx: np.ndarray) -> None:
        raise NotImplementedError

    def compact(self, name: str = "") -> CompactionReport:
        if self.compacted:
            raise CompactionError(f"layer {name or '?'} is already compacted")
        self.harden_mask()
        before = self.stored_counts()
        bits = self._mask.bits
        dyn_idx = np.flatnonzero(bits)
        static_idx = np.flatnonzero(~bits)
        self._compact_factors(dyn_idx)
        if self.mode == "pad":
            self.static_vals = Tensor(self.static.data[static_idx].copy(), requires_grad=True)
        self.static = None
        self._perm = np.argsort(np.concatenate([dyn_idx, static_idx]), kind="stable")
        after = self.stored_counts()
        dc = self._mask.dynamic_count
        return CompactionReport(
            layer=name, m=self.m, dynamic_count=dc,
            params_before=sum(before.values()), params_after=sum(after.values()),
            macs_before=self._generation_macs(self.m), macs_after=self._generation_macs(dc),
        )

    def lambdas(self) -> tuple[float, float]:
        return self.scales.values()


class PadDyConv2d(_PadBase):
    """Partially dynamic convolution.

    The mask acts on the aggregated kernel, so one mask of ``m`` entries serves
    all ``k`` kernels.  Static values start at the mean kernel, which is what
    the aggregate equals under uniform attention.
    """

    def __init__(self, layer: DyConv2d, scale_mode: str = "sum-2", mode: str = "pad"):
        self.layer = layer
        init = layer.kernels.data.reshape(layer.k, layer.m).mean(axis=0)
        self._setup(layer.m, layer.k, init, scale_mode, mode)

    @property
    def k(self) -> int:
        return self.layer.k

    def dynamic_snapshot(self) -> np.ndarray:
        return self.layer.kernels.data.reshape(self.layer.k, self.m).mean(axis=0)

    def _aux_count(self) -> int:
        aux = self.layer.attention.num_parameters()
        if self.layer.biases is not None:
            aux += self.layer.biases.size
        return aux + self.scales.num_parameters()

    def _generation_macs(self, dynamic_count: int) -> int:
        return self.layer.k * dynamic_count

    def _compact_factors(self, dyn_idx: np.ndarray) -> None:
        full = self.layer.kernels.data.reshape(self.layer.k, self.m)
        self.factors_dyn = Tensor(full[:, dyn_idx].copy(), requires_grad=True)
        self.layer.kernels = None

    def computational_params(self, x: Tensor, tau: float, pi: Tensor | None = None) -> Tensor:
        pi = self.layer.attend(x, tau) if pi is None else pi
        if self.compacted:
            return self._assemble(pi @ self.factors_dyn)
        return self._assemble(self.layer.aggregate(pi))

    def __call__(self, x: Tensor, tau: float) -> Tensor:
        pi = self.layer.attend(x, tau)
        theta_hat = self.computational_params(x, tau, pi)
        return self.layer.convolve(x, theta_hat, self.layer.aggregate_bias(pi))


class PadMoE(_PadBase):
    """Partially dynamic mixture of experts.

    One mask over an expert's two weight matrices is shared by every expert
    (``expert_i <- mask * expert_i``).  Each selected expert computes with
    ``lam_d * mask * expert_i + lam_s * (1 - mask) * static``.  Gate and
    biases stay fully dynamic.
    """

    def __init__(self, layer: MoE, scale_mode: str = "sum-2", mode: str = "pad", static_init: str = "shared"):
        self.layer = layer
        flat = layer.flat_expert_weights().data
        if static_init == "shared" and layer._init_flat is not None:
            init = layer._init_flat.copy()
        elif static_init in ("shared", "mean"):
            init = flat.mean(axis=0)
        else:
            raise ValueError(f"unknown static init {static_init!r}")
        self.static_init = static_init
        # private copy: the trainable static vector may drift (weight decay) before partition
        self._shared = init.copy() if static_init == "shared" else None
        self._setup(layer.m, layer.experts, init, scale_mode, mode)

    def dynamic_snapshot(self) -> np.ndarray:
        if self._shared is not None:
            return self._shared
        return self._full_factors().mean(axis=0)

    def _full_factors(self) -> np.ndarray:
        return self.layer.flat_expert_weights().data

    def _aux_count(self) -> int:
        lay = self.layer
        return lay.b1.size + lay.b2.size + lay.gate.size + self.scales.num_parameters()

    def _generation_macs(self, dynamic_count: int) -> int:
        return self.layer.top * dynamic_count

    def _compact_factors(self, dyn_idx: np.ndarray) -> None:
        full = self._full_factors()
        self.factors_dyn = Tensor(full[:, dyn_idx].copy(), requires_grad=True)
        self.layer.w1 = None
        self.layer.w2 = None

    def expert_params(self) -> Tensor:
        """Computational weights of every expert, ``[m_experts, m]``."""
        if self.compacted:
            return self._assemble(self.factors_dyn)
        return self._assemble(self.layer.flat_expert_weights())

    def computational_params(self, x: Tensor, tau: float | None = None) -> Tensor:
        """Per-token computational parameters ``[T, m]``.

        The dynamic branch is the gate-weighted sum of the selected experts;
        the static branch is shared by all tokens.
        """
        routing = self.layer.route(x)
        dispatch = T.scatter_along_axis(routing.weights, routing.indices, self.layer.experts, axis=-1)
        factors = self.factors_dyn if self.compacted else self.layer.flat_expert_weights()
        return self._assemble(dispatch @ factors)

    def __call__(self, x: Tensor, tau: float | None = None) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = T.reshape(x, (1, -1))
        routing = self.layer.route(x)
        w1, w2 = self.layer.unflatten(self.expert_params())
        out = self.layer.mix(x, routing, w1, w2)
        return T.reshape(out, (-1,)) if squeeze else out


def compact(layer: _PadBase, name: str = "") -> CompactionReport:
    return layer.compact(name)


def lambdas(layer: _PadBase) -> tuple[float, float]:
    return layer.lambdas()
