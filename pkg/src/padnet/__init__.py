"""Partially dynamic networks: dynamic convolution and mixture-of-experts layers
whose parameters are split into dynamic and static modes."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .models import Network, build_network
from .pad import IndicatorMask, PadDyConv2d, PadMoE, assemble, keep_count
from .tensor import Tensor

__all__ = [
    "ConfigError", "ExperimentConfig", "IndicatorMask", "Network", "PadDyConv2d", "PadMoE", "Tensor",
    "assemble", "build_network", "keep_count", "load_config", "parse_config",
]
