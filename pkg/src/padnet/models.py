"""Build networks from a :class:`~padnet.config.ModelSpec`.

The same spec yields every variant compared in experiments: a static
baseline, the fully dynamic network, a partially dynamic (PAD) network, or a
pruned one.  Convolutional layers are each followed by ReLU; the head is a
global average pool (or flatten), optional hidden linear layers, and a final
linear classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import ConvLayer, ModelSpec, MoELayer, PadSpec
from .nn import Conv2d, DyConv2d, FeedForward, Linear, Module, MoE
from .pad import IndicatorMask, PadDyConv2d, PadMoE, _PadBase
from .tensor import ShapeError, Tensor

VARIANTS = ("static", "full-dynamic", "pad", "prune")


def variant_for(method: str) -> str:
    if method in ("static", "full-dynamic"):
        return method
    return "prune" if method == "snip-prune" else "pad"


@dataclass
class LayerTrace:
    """What one body layer saw and produced in a traced forward pass."""

    name: str
    layer: Module
    input: Tensor
    output: Tensor  # post-activation for conv layers


class Network(Module):
    def __init__(self, spec: ModelSpec, variant: str, rng: np.random.Generator, pad: PadSpec | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.spec = spec
        self.variant = variant
        scale = pad.scale if pad is not None else "sum-2"
        static_init = pad.static_init if pad is not None else "shared"
        shape = tuple(spec.input_shape)
        body, head = [], []
        self._kinds: list[str] = []
        spatial = len(shape) == 3
        for i, ls in enumerate(spec.layers):
            if isinstance(ls, ConvLayer):
                if not spatial:
                    raise ShapeError(f"layer {i}: convolution needs [C, H, W] input, got {list(shape)}")
                c = shape[0]
                if ls.type == "conv" or variant == "static":
                    layer = Conv2d(c, ls.out_channels, ls.kernel_size, rng, ls.stride, ls.padding)
                else:
                    layer = DyConv2d(c, ls.out_channels, ls.kernel_size, ls.k, rng, ls.stride, ls.padding,
                                     attention_hidden=ls.attention_hidden)
                    if variant in ("pad", "prune"):
                        layer = PadDyConv2d(layer, scale, variant)
                h = T.conv_output_size(shape[1], ls.kernel_size, ls.stride, ls.padding)
                w = T.conv_output_size(shape[2], ls.kernel_size, ls.stride, ls.padding)
                if h <= 0 or w <= 0:
                    raise ShapeError(f"layer {i}: spatial size collapses to {h}x{w}")
                shape = (ls.out_channels, h, w)
                body.append(layer)
                self._kinds.append("conv")
            elif isinstance(ls, MoELayer):
                if spatial:
                    raise ShapeError(f"layer {i}: expert layers need flat [d] input")
                d = shape[0]
                if ls.type == "ffn" or variant == "static":
                    layer = FeedForward(d, ls.hidden, rng)
                else:
                    layer = MoE(d, ls.hidden, ls.experts, ls.top, rng, spec.expert_init, spec.expert_jitter)
                    if variant in ("pad", "prune"):
                        layer = PadMoE(layer, scale, variant, static_init)
                body.append(layer)
                self._kinds.append("token")
            else:
                if spatial:
                    shape = self._head_shape(shape)
                    spatial = False
                head.append((Linear(int(np.prod(shape)), ls.out_features, rng), ls.activation))
                shape = (ls.out_features,)
                continue
            if head:
                raise ValueError(f"layer {i}: body layers must precede linear layers")
        if spatial:
            shape = self._head_shape(shape)
        self.body = body
        self.head = [lin for lin, _ in head]
        self._head_act = [act for _, act in head]
        self.classifier = Linear(int(np.prod(shape)), spec.num_classes, rng)

    def _head_shape(self, shape):
        return (shape[0],) if self.spec.head == "gap" else (int(np.prod(shape)),)

    # -- introspection ---------------------------------------------------------
    def body_layers(self) -> Iterator[tuple[str, Module]]:
        for i, layer in enumerate(self.body):
            yield f"body.{i}", layer

    def pad_layers(self) -> list[tuple[str, _PadBase]]:
        return [(n, l) for n, l in self.body_layers() if isinstance(l, _PadBase)]

    def dynamic_layers(self) -> list[tuple[str, Module]]:
        return [(n, l) for n, l in self.body_layers() if isinstance(l, (_PadBase, DyConv2d, MoE))]

    # -- forward ---------------------------------------------------------------
    def forward(self, x, tau: float = 1.0, trace: list[LayerTrace] | None = None) -> Tensor:
        h = T.as_tensor(x)
        expect = tuple(self.spec.input_shape)
        if h.shape[1:] != expect:
            raise ShapeError(f"network expects inputs [B, {', '.join(map(str, expect))}], got {h.shape}")
        for (name, layer), kind in zip(self.body_layers(), self._kinds):
            inp = h
            h = layer(h, tau)
            if kind == "conv":
                h = T.relu(h)
            if trace is not None:
                trace.append(LayerTrace(name, layer, inp, h))
        if h.ndim == 4:
            h = T.global_avg_pool(h) if self.spec.head == "gap" else T.reshape(h, (h.shape[0], -1))
        for lin, act in zip(self.head, self._head_act):
            h = lin(h)
            if act:
                h = T.relu(h)
        return self.classifier(h)

    __call__ = forward

    # -- state -----------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        """Every trainable array, plus each PAD layer's mask as a bool vector."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, layer in self.pad_layers():
            out[f"{name}.mask"] = layer.mask.bits
        return out

    def layout(self) -> dict[str, bool]:
        """Compaction flag per PAD layer; needed to rebuild matching shapes."""
        return {name: layer.compacted for name, layer in self.pad_layers()}

    def load_state(self, state: dict[str, np.ndarray], layout: dict[str, bool] | None = None) -> None:
        layout = layout or {}
        pads = dict(self.pad_layers())
        for name, layer in pads.items():
            key = f"{name}.mask"
            if key not in state:
                raise KeyError(f"state is missing {key}")
            bits = np.asarray(state[key], dtype=bool)
            if bits.shape != (layer.m,):
                raise ShapeError(f"{key}: shape {bits.shape} != ({layer.m},)")
            if layout.get(name) and not layer.compacted:
                layer.set_mask(IndicatorMask(bits))
                layer.compact(name)
            elif layer.compacted:
                if not np.array_equal(bits, layer.mask.bits):
                    raise ValueError(f"{key}: cannot change the mask of a compacted layer")
            else:
                layer.set_mask(IndicatorMask(bits))
        params = dict(self.named_parameters())
        extra = set(state) - set(params) - {f"{n}.mask" for n in pads}
        if extra:
            raise KeyError(f"unexpected entries in state: {sorted(extra)}")
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"state is missing parameter {name}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def build_network(spec: ModelSpec, method: str, rng: np.random.Generator, pad: PadSpec | None = None) -> Network:
    return Network(spec, variant_for(method), rng, pad)
