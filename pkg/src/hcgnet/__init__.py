"""HCGNet: hybrid dense/residual networks built from SMG modules with attention gates.

A numpy-only implementation with a reverse-mode gradient tape, static shape and
cost analysis, and a verification harness.
"""

from .analysis import cost_report, count_flops, count_params, infer_shapes, summarize
from .arch import PRESETS, MacroConfig, ModelGraph, build_model, forward, get_preset, graph_document, load_config, parse_config
from .ops import ConvSpec, ShapeError
from .smg import ConfigError, SMGConfig, smg_forward
from .tensor import GradTape, Tensor, backward

__all__ = [
    "ConfigError",
    "ConvSpec",
    "GradTape",
    "MacroConfig",
    "ModelGraph",
    "PRESETS",
    "SMGConfig",
    "ShapeError",
    "Tensor",
    "backward",
    "build_model",
    "cost_report",
    "count_flops",
    "count_params",
    "forward",
    "get_preset",
    "graph_document",
    "infer_shapes",
    "load_config",
    "parse_config",
    "smg_forward",
    "summarize",
]
