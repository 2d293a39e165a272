"""Mode partition: decide which computational parameters stay dynamic.

The score of position ``j`` is the derivative of the loss in its mask entry,
taken at the current mask::

    g_j = dL/dM_j = (lam_d * dyn_j - lam_s * static_j) * dL/dtheta_hat_j

Normalised magnitudes ``s = |g| / sum |g|`` rank positions; the top fraction
stays dynamic and the rest freeze to static values.  Iterative partition
repeats this over ``T`` steps with the kept fraction ``kappa ** (t / T)``,
rescoring only positions that are still dynamic, so masks are nested.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .pad import IndicatorMask, _PadBase, keep_count


class PartitionError(RuntimeError):
    pass


Batch = tuple[np.ndarray, np.ndarray]


def _pad_layers(model) -> list[tuple[str, _PadBase]]:
    layers = model.pad_layers() if hasattr(model, "pad_layers") else list(model)
    if not layers:
        raise PartitionError("model has no partially dynamic layers")
    return layers


def mask_gradient(model, batches: Sequence[Batch], tau: float = 1.0,
                  loss_fn: Callable | None = None) -> dict[str, np.ndarray]:
    """``dL/dM`` per PAD layer, loss summed over ``batches`` in one backward pass.

    ``loss_fn(logits, labels)`` defaults to mean cross-entropy.  Positions
    already static score exactly 0.
    """
    if len(batches) == 0 or any(len(y) == 0 for _, y in batches):
        raise PartitionError("mask gradient needs at least one non-empty batch")
    loss_fn = loss_fn or T.cross_entropy
    layers = _pad_layers(model)
    relaxed = {name: layer.relax_mask() for name, layer in layers}
    try:
        total = None
        for x, y in batches:
            loss = loss_fn(model(x, tau), y)
            total = loss if total is None else total + loss
        total.backward()
    finally:
        for _, layer in layers:
            layer.harden_mask()
        if hasattr(model, "zero_grad"):
            model.zero_grad()
    out = {}
    for name, layer in layers:
        g = relaxed[name].grad
        g = np.zeros(layer.m) if g is None else g.copy()
        g[~layer.mask.bits] = 0.0
        out[name] = g
    return out


def saliency(g: np.ndarray, dynamic: np.ndarray | None = None) -> np.ndarray:
    """``|g| / sum |g|``; if every score is 0, uniform over ``dynamic`` positions."""
    g = np.asarray(g, dtype=np.float64)
    if np.isnan(g).any():
        raise ValueError("saliency: gradient contains NaN")
    mag = np.abs(g)
    total = mag.sum()
    if total > 0 and np.isfinite(total):
        return mag / total
    if not np.isfinite(total):
        raise ValueError("saliency: gradient magnitudes are not finite")
    live = np.ones(g.shape, dtype=bool) if dynamic is None else np.asarray(dynamic, dtype=bool)
    if not live.any():
        return np.zeros(g.shape)
    return live / live.sum()


def select_top(s: np.ndarray, count: int, eligible: np.ndarray | None = None) -> np.ndarray:
    """Bool vector with the ``count`` highest scores set; ties go to the lower index."""
    s = np.asarray(s, dtype=np.float64)
    idx = np.arange(s.size) if eligible is None else np.flatnonzero(eligible)
    if count > idx.size:
        raise PartitionError(f"cannot keep {count} of {idx.size} eligible positions")
    order = idx[np.argsort(-s[idx], kind="stable")]
    out = np.zeros(s.size, dtype=bool)
    out[order[:count]] = True
    return out


def threshold(s: np.ndarray, kappa: float) -> IndicatorMask:
    """Keep the top ``ceil(kappa * m)`` positions of ``s``."""
    if not 0 < kappa <= 1:
        raise ValueError(f"kappa must lie in (0, 1], got {kappa}")
    s = np.asarray(s)
    return IndicatorMask(select_top(s, keep_count(kappa, s.size)))


@dataclass(frozen=True)
class PartitionPlan:
    """Kept fraction ``kappa ** (t / steps)`` for ``t = 1..steps``."""

    kappa: float
    steps: int = 5
    batches: int = 10

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.steps < 1 or self.batches < 1:
            raise ValueError("steps and batches must be positive")

    def ratios(self) -> list[float]:
        return [self.kappa ** (t / self.steps) for t in range(1, self.steps + 1)]


@dataclass
class PartitionResult:
    method: str
    masks: dict[str, list[np.ndarray]] = field(default_factory=dict)  # layer -> mask after each step
    events: list[dict] = field(default_factory=list)

    def final(self) -> dict[str, np.ndarray]:
        return {name: hist[-1] for name, hist in self.masks.items()}

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


def _take_batches(stream: Iterator[Batch], b: int, step: int) -> list[Batch]:
    out = []
    for _ in range(b):
        try:
            out.append(next(stream))
        except StopIteration:
            raise PartitionError(f"data exhausted at partition step {step} after {len(out)} of {b} batches") from None
    return out


def imp(model, stream: Iterable[Batch], plan: PartitionPlan, budget: str = "global",
        tau: float = 1.0, method: str = "imp") -> PartitionResult:
    """Iterative mode partition; ``plan.steps == 1`` is one-shot partition.

    ``budget="global"`` ranks all PAD layers' positions together so layer
    ratios emerge; ``"layer"`` gives every layer the same ratio.
    """
    if budget not in ("global", "layer"):
        raise ValueError(f"budget must be 'global' or 'layer', got {budget!r}")
    layers = _pad_layers(model)
    stream = iter(stream)
    result = PartitionResult(method, {name: [] for name, _ in layers})
    for t, d_t in enumerate(plan.ratios(), start=1):
        batches = _take_batches(stream, plan.batches, t)
        grads = mask_gradient(model, batches, tau)
        if budget == "layer":
            for name, layer in layers:
                s = saliency(grads[name], layer.mask.bits)
                keep = select_top(s, keep_count(d_t, layer.m), layer.mask.bits)
                _apply(result, t, d_t, name, layer, keep, s)
        else:
            sizes = [layer.m for _, layer in layers]
            live = np.concatenate([layer.mask.bits for _, layer in layers])
            s = saliency(np.concatenate([grads[n] for n, _ in layers]), live)
            keep = select_top(s, keep_count(d_t, sum(sizes)), live)
            for (name, layer), k, sl in zip(layers, np.split(keep, np.cumsum(sizes)[:-1]),
                                            np.split(s, np.cumsum(sizes)[:-1])):
                _apply(result, t, d_t, name, layer, k, sl, keep_all=s[keep])
    return result


def _apply(result: PartitionResult, t: int, d_t: float, name: str, layer: _PadBase,
           keep: np.ndarray, s: np.ndarray, keep_all: np.ndarray | None = None) -> None:
    kept = s[keep] if keep_all is None else keep_all
    layer.freeze(IndicatorMask(keep))
    result.masks[name].append(keep.copy())
    result.events.append({
        "method": result.method, "step": t, "layer": name, "d_t": d_t,
        "threshold": float(kept.min()) if kept.size else math.nan,
        "count": int(keep.sum()), "m": int(keep.size),
    })


def mp(model, stream: Iterable[Batch], kappa: float, batches: int = 10, budget: str = "global",
       tau: float = 1.0) -> PartitionResult:
    return imp(model, stream, PartitionPlan(kappa, 1, batches), budget, tau, method="mp")


def random_partition(model, kappa: float, rng: np.random.Generator | int) -> PartitionResult:
    """Exactly ``ceil(kappa * m)`` dynamic positions per layer, uniformly at random."""
    if not 0 < kappa <= 1:
        raise ValueError(f"kappa must lie in (0, 1], got {kappa}")
    rng = np.random.default_rng(rng)
    layers = _pad_layers(model)
    result = PartitionResult("random", {name: [] for name, _ in layers})
    for name, layer in layers:
        keep = np.zeros(layer.m, dtype=bool)
        keep[rng.choice(layer.m, keep_count(kappa, layer.m), replace=False)] = True
        layer.freeze(IndicatorMask(keep))
        result.masks[name].append(keep)
        result.events.append({"method": "random", "step": 1, "layer": name, "d_t": kappa,
                              "threshold": math.nan, "count": int(keep.sum()), "m": layer.m})
    return result


def snip_prune(model, stream: Iterable[Batch], kappa: float, batches: int = 10, budget: str = "global",
               tau: float = 1.0) -> PartitionResult:
    """One-shot saliency pruning: unkept positions are zeroed rather than made static.

    The layers must be built in ``prune`` mode; the scoring is the same as
    :func:`mp`, where ``dL/dM_j = dyn_j * dL/dtheta_hat_j``.
    """
    for name, layer in _pad_layers(model):
        if layer.mode != "prune":
            raise PartitionError(f"{name}: snip_prune needs layers in prune mode, got {layer.mode!r}")
    return imp(model, stream, PartitionPlan(kappa, 1, batches), budget, tau, method="snip-prune")


def run_method(method: str, model, stream: Iterable[Batch], kappa: float, steps: int = 5, batches: int = 10,
               budget: str = "global", tau: float = 1.0, rng=None) -> PartitionResult:
    if method == "imp":
        return imp(model, stream, PartitionPlan(kappa, steps, batches), budget, tau)
    if method == "mp":
        return mp(model, stream, kappa, batches, budget, tau)
    if method == "random":
        return random_partition(model, kappa, rng)
    if method == "snip-prune":
        return snip_prune(model, stream, kappa, batches, budget, tau)
    raise ValueError(f"unknown partition method {method!r}")
