"""Post-hoc measurements on trained models.

Variance convention: population variance (divide by N) across samples,
computed per position (or output unit) and then averaged over positions.
Each sample is run through the network on its own, so identical samples
produce bit-identical values and an exact zero.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import LayerTrace, Network
from .nn import Conv2d, DyConv2d, FeedForward, Linear, MoE
from .pad import IndicatorMask, PadDyConv2d, PadMoE, _PadBase


def population_variance(samples: np.ndarray) -> float:
    """Mean over positions of the across-sample variance of ``samples [N, ...]``.

    Variances are taken after subtracting the first sample, which leaves the
    value unchanged but makes input-independent positions exactly 0.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValueError(f"variance needs at least 2 samples, got {samples.shape[0]}")
    flat = samples.reshape(samples.shape[0], -1)
    return float(np.var(flat - flat[0], axis=0).mean())


def computational_params(layer, x: T.Tensor, tau: float) -> np.ndarray:
    """``theta_hat`` each sample (or token) in ``x`` computes with, ``[B, m]``."""
    if isinstance(layer, (PadDyConv2d, DyConv2d)):
        return layer.computational_params(x, tau).data
    if isinstance(layer, (PadMoE, MoE)):
        return layer.computational_params(x).data
    if isinstance(layer, Conv2d):
        return layer.computational_params(x).data
    if isinstance(layer, FeedForward):
        return np.broadcast_to(layer.flat_weights().data, (x.shape[0], layer.m))
    raise TypeError(f"no computational parameters defined for {type(layer).__name__}")


def _per_sample_traces(model: Network, inputs: np.ndarray, tau: float) -> list[list[LayerTrace]]:
    inputs = np.asarray(inputs)
    if len(inputs) < 2:
        raise ValueError(f"variance needs at least 2 samples, got {len(inputs)}")
    out = []
    with T.no_grad():
        for i in range(len(inputs)):
            trace: list[LayerTrace] = []
            model(inputs[i:i + 1], tau, trace=trace)
            out.append(trace)
    return out


@dataclass
class VarianceRow:
    layer: str
    kind: str
    parameter_variance: float
    output_variance: float


def variance_report(model: Network, inputs: np.ndarray, tau: float = 1.0) -> list[VarianceRow]:
    """Parameter and output variance of every body layer over ``inputs``."""
    traces = _per_sample_traces(model, inputs, tau)
    rows = []
    with T.no_grad():
        for j, first in enumerate(traces[0]):
            params = np.stack([computational_params(tr[j].layer, tr[j].input, tau)[0] for tr in traces])
            outputs = np.stack([tr[j].output.data[0] for tr in traces])
            rows.append(VarianceRow(first.name, _kind(first.layer), population_variance(params),
                                    population_variance(outputs)))
    return rows


def parameter_variance(model: Network, inputs: np.ndarray, tau: float = 1.0) -> dict[str, float]:
    return {r.layer: r.parameter_variance for r in variance_report(model, inputs, tau)}


def output_variance(model: Network, inputs: np.ndarray, tau: float = 1.0) -> dict[str, float]:
    return {r.layer: r.output_variance for r in variance_report(model, inputs, tau)}


def _kind(layer) -> str:
    if isinstance(layer, _PadBase):
        return ("pad-" if layer.mode == "pad" else "pruned-") + ("dyconv" if isinstance(layer, PadDyConv2d) else "moe")
    return {Conv2d: "conv", DyConv2d: "dyconv", MoE: "moe", FeedForward: "ffn", Linear: "linear"}[type(layer)]


# -- accounting ------------------------------------------------------------------

@dataclass
class AccountRow:
    layer: str
    kind: str
    params: int
    computational: int
    dynamic_count: int
    macs: int


def _macs(layer, inp_shape, out_shape) -> int:
    """Multiply-accumulates for one sample (conv) or one token (experts)."""
    if isinstance(layer, Linear):
        return layer.in_features * layer.out_features
    if isinstance(layer, FeedForward):
        return 2 * layer.dim * layer.hidden
    if isinstance(layer, (Conv2d, DyConv2d, PadDyConv2d)):
        inner = layer.layer if isinstance(layer, PadDyConv2d) else layer
        o, c, kh, kw = inner.kernel_shape
        conv = out_shape[-2] * out_shape[-1] * o * c * kh * kw
        if isinstance(layer, Conv2d):
            return conv
        att = inner.attention
        attention = c * att.hidden + att.hidden * inner.k
        gen = layer._generation_macs(layer.mask.dynamic_count if layer.compacted else layer.m) \
            if isinstance(layer, PadDyConv2d) else inner.k * inner.m
        return conv + attention + gen
    inner = layer.layer if isinstance(layer, PadMoE) else layer
    base = inner.dim * inner.experts + inner.top * 2 * inner.dim * inner.hidden
    if isinstance(layer, PadMoE):
        base += layer._generation_macs(layer.mask.dynamic_count if layer.compacted else layer.m)
    return base


def param_mac_count(model: Network) -> list[AccountRow]:
    """Stored scalars and per-sample MACs for every layer, plus a total row.

    The total equals the number of scalars a checkpoint of ``model`` stores.
    """
    shape = (1,) + tuple(model.spec.input_shape)
    trace: list[LayerTrace] = []
    with T.no_grad():
        model(np.zeros(shape), 1.0, trace=trace)
    rows = []
    for tr in trace:
        layer = tr.layer
        comp = layer.m if hasattr(layer, "m") else int(np.prod(layer.kernel_shape))
        dyn = layer.mask.dynamic_count if isinstance(layer, _PadBase) else \
            (comp if isinstance(layer, (DyConv2d, MoE)) else 0)
        rows.append(AccountRow(tr.name, _kind(layer), layer.num_parameters(), comp, dyn,
                               _macs(layer, tr.input.shape, tr.output.shape)))
    for i, lin in enumerate(model.head):
        rows.append(AccountRow(f"head.{i}", "linear", lin.num_parameters(), lin.in_features * lin.out_features,
                               0, _macs(lin, None, None)))
    cls = model.classifier
    rows.append(AccountRow("classifier", "linear", cls.num_parameters(), cls.in_features * cls.out_features,
                           0, _macs(cls, None, None)))
    rows.append(AccountRow("total", "", sum(r.params for r in rows), sum(r.computational for r in rows),
                           sum(r.dynamic_count for r in rows), sum(r.macs for r in rows)))
    return rows


# -- layer-wise ratios -----------------------------------------------------------

@dataclass
class RatioRow:
    layer: str
    m: int
    dynamic_count: int
    ratio: float


def ratio_distribution(model: Network) -> list[RatioRow]:
    """Realised dynamic ratio per body layer; static layers report 0, fully dynamic 1."""
    rows = []
    for name, layer in model.body_layers():
        if isinstance(layer, _PadBase):
            rows.append(RatioRow(name, layer.m, layer.mask.dynamic_count, layer.mask.dynamic_ratio))
            continue
        m = layer.m if hasattr(layer, "m") else int(np.prod(layer.kernel_shape))
        dc = m if isinstance(layer, (DyConv2d, MoE)) else 0
        rows.append(RatioRow(name, m, dc, dc / m))
    return rows


def weighted_ratio(rows: list[RatioRow]) -> float:
    """Parameter-weighted mean ratio, i.e. the realised global dynamic ratio."""
    m = sum(r.m for r in rows)
    return sum(r.dynamic_count for r in rows) / m if m else 0.0


def write_csv(path, rows) -> Path:
    rows = [asdict(r) for r in rows]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [])
        w.writeheader()
        w.writerows(rows)
    return Path(path)


# -- mask images -----------------------------------------------------------------

def mask_shape(layer: _PadBase) -> tuple[int, int]:
    """Natural 2-D view: conv kernels as ``[out, in*kh*kw]``; an expert's
    flat ``w1 | w2`` vector as ``[2*d, h]``."""
    if isinstance(layer, PadDyConv2d):
        o = layer.layer.out_channels
        return o, layer.m // o
    return 2 * layer.layer.dim, layer.layer.hidden


def export_mask(mask: IndicatorMask | np.ndarray, shape: tuple[int, int], path) -> Path:
    """Binary PGM (P5): black (0) where dynamic, white (255) where static."""
    bits = mask.bits if isinstance(mask, IndicatorMask) else np.asarray(mask, dtype=bool)
    rows, cols = shape
    if rows * cols != bits.size:
        raise ValueError(f"mask of {bits.size} entries does not fit shape {rows}x{cols}")
    pixels = np.where(bits, 0, 255).astype(np.uint8).reshape(rows, cols)
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + pixels.tobytes())
    return Path(path)


def import_mask(path) -> IndicatorMask:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5" or parts[3] != b"255":
        raise ValueError(f"{path}: not a P5 PGM with maxval 255")
    cols, rows = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(raw[len(raw) - rows * cols:], dtype=np.uint8)
    if not np.isin(pixels, (0, 255)).all():
        raise ValueError(f"{path}: mask image must be pure black/white")
    return IndicatorMask(pixels == 0)
