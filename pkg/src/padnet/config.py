"""Experiment configuration: one JSON document, validated with pydantic.

Relative data paths resolve against the directory holding the config file.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .pad import SCALE_MODES

METHODS = ("full-dynamic", "static", "imp", "mp", "random", "snip-prune")
PARTITION_METHODS = ("imp", "mp", "random", "snip-prune")
_TIMING = re.compile(r"^(init|epoch-(\d+))$")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the first offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ConvLayer(_Spec):
    type: Literal["conv", "dyconv"]
    out_channels: int = Field(gt=0)
    kernel_size: int = Field(3, gt=0)
    stride: int = Field(1, gt=0)
    padding: int = Field(1, ge=0)
    k: int = Field(4, gt=0, description="parallel kernels (dyconv only)")
    attention_hidden: Optional[int] = Field(None, gt=0)


class MoELayer(_Spec):
    type: Literal["moe", "ffn"]
    hidden: int = Field(gt=0)
    experts: int = Field(8, gt=1)
    top: int = Field(2, gt=0)


class LinearLayer(_Spec):
    type: Literal["linear"]
    out_features: int = Field(gt=0)
    activation: bool = True


LayerSpec = Annotated[Union[ConvLayer, MoELayer, LinearLayer], Field(discriminator="type")]


class ModelSpec(_Spec):
    input_shape: list[int] = Field(min_length=1)
    num_classes: int = Field(gt=1)
    layers: list[LayerSpec] = Field(min_length=1)
    head: Literal["gap", "flatten"] = "gap"
    expert_init: Literal["shared", "independent"] = "shared"
    expert_jitter: float = Field(0.0, ge=0)


class PadSpec(_Spec):
    enabled: bool = True
    kappa: Optional[float] = Field(None, gt=0, le=1)
    method: Literal["imp", "mp", "random", "snip-prune"] = "imp"
    steps: int = Field(5, gt=0)
    batches: int = Field(10, gt=0)
    timing: str = "init"
    budget: Literal["global", "layer"] = "global"
    scale: Literal[SCALE_MODES] = "sum-2"
    static_init: Literal["shared", "mean"] = "shared"
    compact: bool = True
    partition_tau: Optional[float] = Field(None, gt=0)

    @property
    def partition_epoch(self) -> int:
        """0-based epoch before which the partition runs."""
        m = _TIMING.match(self.timing)
        return 0 if m.group(1) == "init" else int(m.group(2)) - 1

    @property
    def effective_steps(self) -> int:
        return self.steps if self.method == "imp" else 1


class OptimSpec(_Spec):
    lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(128, gt=0)
    warmup_frac: float = Field(0.1, ge=0, le=1)


class TemperatureSpec(_Spec):
    start: float = Field(30.0, gt=0)
    end: float = Field(1.0, gt=0)
    anneal_epochs: float = Field(10, ge=0)


class IdxData(_Spec):
    kind: Literal["idx"]
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    train_subset: Optional[int] = Field(None, gt=0)
    test_subset: Optional[int] = Field(None, gt=0)


class CifarData(_Spec):
    kind: Literal["cifar"]
    train_files: list[str] = Field(min_length=1)
    test_files: list[str] = Field(min_length=1)
    train_subset: Optional[int] = Field(None, gt=0)
    test_subset: Optional[int] = Field(None, gt=0)
    subset_seed: int = 0


class SyntheticData(_Spec):
    kind: Literal["synthetic"]
    dim: int = Field(gt=0)
    classes: int = Field(gt=1)
    train_size: int = Field(gt=0)
    test_size: int = Field(gt=0)
    noise: float = Field(ge=0)
    clusters_per_class: int = Field(2, gt=0)
    seed: int = 0


DataSpec = Annotated[Union[IdxData, CifarData, SyntheticData], Field(discriminator="kind")]


class SweepSpec(_Spec):
    kappas: list[Annotated[float, Field(gt=0, le=1)]] = Field(min_length=1)
    seeds: int = Field(1, gt=0)


class CompareSpec(_Spec):
    methods: list[Literal[METHODS]] = Field(min_length=1)
    seeds: int = Field(1, gt=0)


class ExperimentConfig(_Spec):
    name: str = "experiment"
    seed: int = 0
    epochs: int = Field(ge=0)
    eval_every: int = Field(1, gt=0)
    method: Literal[METHODS] = "imp"
    model: ModelSpec
    pad: Optional[PadSpec] = None
    optim: OptimSpec = OptimSpec()
    temperature: TemperatureSpec = TemperatureSpec()
    data: DataSpec
    sweep: Optional[SweepSpec] = None
    compare: Optional[CompareSpec] = None
    threads: int = Field(1, gt=0)

    @property
    def pad_active(self) -> bool:
        return self.method in PARTITION_METHODS and self.pad is not None and self.pad.enabled


def _check_semantics(cfg: ExperimentConfig) -> None:
    if cfg.pad is not None and cfg.pad.enabled:
        if cfg.pad.kappa is None:
            raise ConfigError("pad.kappa", "required when pad.enabled is true")
        m = _TIMING.match(cfg.pad.timing)
        if not m or (m.group(2) is not None and int(m.group(2)) < 1):
            raise ConfigError("pad.timing", f"expected 'init' or 'epoch-K' with K >= 1, got {cfg.pad.timing!r}")
        if m.group(2) is not None and cfg.epochs > 0 and int(m.group(2)) > cfg.epochs:
            raise ConfigError("pad.timing", f"partition at {cfg.pad.timing} but only {cfg.epochs} epochs")
        if cfg.pad.method != cfg.method and cfg.method in PARTITION_METHODS:
            raise ConfigError("method", f"top-level method {cfg.method!r} disagrees with pad.method {cfg.pad.method!r}")
    if cfg.method in PARTITION_METHODS and (cfg.pad is None or not cfg.pad.enabled):
        raise ConfigError("pad", f"method {cfg.method!r} needs an enabled pad section")
    for i, layer in enumerate(cfg.model.layers):
        if isinstance(layer, MoELayer) and layer.type == "moe" and not layer.top < layer.experts:
            raise ConfigError(f"model.layers.{i}.top", "need top < experts")
    if isinstance(cfg.data, SyntheticData) and cfg.model.input_shape != [cfg.data.dim]:
        raise ConfigError("model.input_shape", f"must be [{cfg.data.dim}] for the synthetic task")


def _loc(loc: tuple) -> str:
    # drop pydantic's union-tag entries such as 'ConvLayer' / 'dyconv'
    parts = [str(p) for p in loc if not (isinstance(p, str) and (p[:1].isupper() or p in _TAGS))]
    return ".".join(parts)


_TAGS = {"conv", "dyconv", "moe", "ffn", "linear", "idx", "cifar", "synthetic"}


def parse_config(raw: dict[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a raw config dict; raises :class:`ConfigError` naming the first bad field."""
    if "method" not in raw and isinstance(raw.get("pad"), dict) and raw["pad"].get("enabled", True):
        raw = {**raw, "method": raw["pad"].get("method", "imp")}
    elif "method" not in raw:
        raw = {**raw, "method": "full-dynamic"}
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(_loc(err["loc"]) or "<root>", err["msg"]) from None
    _check_semantics(cfg)
    if base_dir is not None:
        cfg = _resolve_paths(cfg, Path(base_dir))
    return cfg


def load_config(path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"not valid JSON: {exc}") from None
    if overrides:
        raw = apply_overrides(raw, overrides)
    return parse_config(raw, path.parent)


def apply_overrides(raw: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Set dotted keys (``"pad.kappa"``) on a copy of ``raw``; ``None`` values are skipped."""
    out = json.loads(json.dumps(raw))
    for key, value in overrides.items():
        if value is None:
            continue
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def with_method(cfg: ExperimentConfig, method: str, kappa: float | None = None, seed: int | None = None) -> ExperimentConfig:
    """Copy of ``cfg`` rerouted to another partition method (or baseline)."""
    raw = cfg.model_dump(mode="json")
    raw["method"] = method
    if seed is not None:
        raw["seed"] = seed
    if method in PARTITION_METHODS:
        pad = raw.get("pad") or {}
        pad["enabled"] = True
        pad["method"] = method
        if kappa is not None:
            pad["kappa"] = kappa
        raw["pad"] = pad
    elif raw.get("pad") is not None:
        raw["pad"]["enabled"] = False
    raw["sweep"] = None
    raw["compare"] = None
    return parse_config(raw)


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    data = cfg.data

    def fix(p: str) -> str:
        q = Path(p)
        return str(q if q.is_absolute() else (base / q).resolve())

    if isinstance(data, IdxData):
        data = data.model_copy(update={k: fix(getattr(data, k)) for k in
                                       ("train_images", "train_labels", "test_images", "test_labels")})
    elif isinstance(data, CifarData):
        data = data.model_copy(update={"train_files": [fix(p) for p in data.train_files],
                                       "test_files": [fix(p) for p in data.test_files]})
    return cfg.model_copy(update={"data": data})


def json_schema() -> dict[str, Any]:
    return ExperimentConfig.model_json_schema()
