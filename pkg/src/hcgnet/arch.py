"""HCGNet macro-architecture: presets, config files, graph building and execution.

A network is a stem, a sequence of hybrid blocks separated by single-SMG
transition layers, and a BN-ReLU / global-average-pool / FC head.  Inside a
hybrid block every SMG module sees the channel concatenation of the block
input and all earlier module outputs, and contributes ``k`` (growth rate) new
channels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np
import yaml

from . import ops
from .init import fan_out_normal, zeros
from .ops import BNState, ConvSpec, ShapeError
from .smg import ConfigError, SMGConfig, SMGParams, smg_forward
from .tensor import Tensor


@dataclass(frozen=True)
class HybridParams:
    g: int = 4
    alpha: float = 4
    r_u: float = 2
    r_f: float = 2


@dataclass(frozen=True)
class TransitionParams:
    g: int = 1
    alpha: float = 1.5
    r_u: float = 4
    r_f: float = 4
    theta: float = 0.5
    stride: int = 2


@dataclass(frozen=True)
class MacroConfig:
    name: str
    stem: str  # "cifar" | "imagenet"
    blocks: tuple[tuple[int, int], ...]  # (modules, growth) per hybrid block
    num_classes: int
    input_resolution: int
    hybrid: HybridParams = field(default_factory=HybridParams)
    transition: TransitionParams = field(default_factory=TransitionParams)
    dropout: float = 0.1

    def __post_init__(self):
        if self.stem not in ("cifar", "imagenet"):
            raise ConfigError(f"stem must be 'cifar' or 'imagenet', got {self.stem!r}")
        if not self.blocks:
            raise ConfigError("at least one hybrid block is required")
        for i, (n, k) in enumerate(self.blocks, 1):
            if n < 2:
                raise ConfigError(f"block{i}: hybrid blocks need at least 2 modules, got {n}")
            if k < 1:
                raise ConfigError(f"block{i}: growth rate must be positive, got {k}")
        if self.num_classes < 1 or self.input_resolution < 1:
            raise ConfigError("classes and input resolution must be positive")
        if not 0 < self.transition.theta <= 1:
            raise ConfigError(f"compression factor must lie in (0, 1], got {self.transition.theta}")

    @property
    def stem_channels(self) -> int:
        return 2 * self.blocks[0][1] if self.stem == "cifar" else 64


PRESETS: dict[str, MacroConfig] = {
    "A1": MacroConfig("HCGNet-A1", "cifar", ((8, 12), (8, 24), (8, 36)), 10, 32),
    "A2": MacroConfig("HCGNet-A2", "cifar", ((8, 24), (8, 36), (8, 64)), 10, 32),
    "A3": MacroConfig("HCGNet-A3", "cifar", ((12, 36), (12, 48), (12, 80)), 10, 32),
    "B": MacroConfig("HCGNet-B", "imagenet", ((3, 32), (6, 48), (12, 64), (8, 96)), 1000, 224),
    "C": MacroConfig("HCGNet-C", "imagenet", ((6, 48), (12, 56), (18, 72), (14, 112)), 1000, 224),
}


def get_preset(name: str) -> MacroConfig:
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# config files


class ConfigKeyError(ConfigError):
    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path
        self.message = message


_TOP_KEYS = {"name", "stem", "classes", "input", "blocks", "hybrid", "transition"}
_BLOCK_KEYS = {"modules", "growth"}
_HYBRID_KEYS = {"g": "g", "alpha": "alpha", "ru": "r_u", "rf": "r_f"}
_TRANSITION_KEYS = {**_HYBRID_KEYS, "theta": "theta"}


def _check_keys(obj: Any, allowed, path: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigKeyError(path or "<root>", f"expected a mapping, got {type(obj).__name__}")
    for key in obj:
        if key not in allowed:
            raise ConfigKeyError(f"{path}.{key}" if path else str(key), "unknown key")
    return obj


def _number(value, path: str, kind=int):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigKeyError(path, f"expected a number, got {value!r}")
    if kind is int and value != int(value):
        raise ConfigKeyError(path, f"expected an integer, got {value!r}")
    return kind(value)


def parse_config(doc: dict) -> MacroConfig:
    """Build a :class:`MacroConfig` from a parsed config document.

    Unknown keys raise :class:`ConfigKeyError` carrying the dotted key path.
    """
    _check_keys(doc, _TOP_KEYS, "")
    for key in ("stem", "classes", "input", "blocks"):
        if key not in doc:
            raise ConfigKeyError(key, "missing required key")
    blocks_doc = doc["blocks"]
    if not isinstance(blocks_doc, list) or not blocks_doc:
        raise ConfigKeyError("blocks", "expected a non-empty list")
    blocks = []
    for i, b in enumerate(blocks_doc):
        path = f"blocks[{i}]"
        _check_keys(b, _BLOCK_KEYS, path)
        if set(b) != _BLOCK_KEYS:
            raise ConfigKeyError(path, "needs both 'modules' and 'growth'")
        blocks.append((_number(b["modules"], f"{path}.modules"), _number(b["growth"], f"{path}.growth")))

    def overrides(section, table, cls, defaults):
        if section not in doc:
            return defaults
        body = _check_keys(doc[section], table, section)
        kw = {}
        for key, attr in table.items():
            if key in body:
                kind = int if attr == "g" else float
                kw[attr] = _number(body[key], f"{section}.{key}", kind)
        return cls(**{**asdict(defaults), **kw})

    try:
        return MacroConfig(
            name=str(doc.get("name", "custom")),
            stem=doc["stem"],
            blocks=tuple(blocks),
            num_classes=_number(doc["classes"], "classes"),
            input_resolution=_number(doc["input"], "input"),
            hybrid=overrides("hybrid", _HYBRID_KEYS, HybridParams, HybridParams()),
            transition=overrides("transition", _TRANSITION_KEYS, TransitionParams, TransitionParams()),
        )
    except ConfigKeyError:
        raise
    except ConfigError as err:
        raise ConfigKeyError("<config>", str(err)) from None


def load_config(path: Union[str, Path]) -> MacroConfig:
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ConfigKeyError("<file>", f"not valid structured text: {err}") from None
    return parse_config(doc)


# ---------------------------------------------------------------------------
# graph


@dataclass
class Node:
    id: int
    name: str
    kind: str
    inputs: tuple[int, ...]
    stage: str
    config: dict[str, Any] = field(default_factory=dict)
    params: tuple[str, ...] = ()


@dataclass
class ModelGraph:
    """Topologically ordered nodes plus the named parameter store.

    ``params`` holds every learnable tensor under its dotted name.  BN running
    statistics live in ``bn_states`` (keyed by BN path) and SMG weight bundles
    in ``smg_params`` (keyed by node name); both share tensor objects with
    ``params``.
    """

    config: MacroConfig
    nodes: list[Node]
    params: dict[str, Tensor]
    bn_states: dict[str, BNState]
    smg_params: dict[str, SMGParams]
    input_id: int = 0
    output_id: int = -1

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(src, n.id) for n in self.nodes for src in n.inputs]

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def smg_config(self, node: Node) -> SMGConfig:
        return SMGConfig(**node.config)

    def set_mode(self, mode: str) -> None:
        for bn in self.bn_states.values():
            bn.mode = mode


class _Builder:
    def __init__(self, config: MacroConfig, rng: np.random.Generator, dtype):
        self.config = config
        self.rng = rng
        self.dtype = dtype
        self.nodes: list[Node] = []
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BNState] = {}
        self.smg_params: dict[str, SMGParams] = {}

    def add(self, name, kind, inputs, stage, config=None, params=()) -> int:
        if any(n.name == name for n in self.nodes):
            raise ConfigError(f"duplicate node name {name}")
        nid = len(self.nodes)
        self.nodes.append(Node(nid, name, kind, tuple(inputs), stage, dict(config or {}), tuple(params)))
        return nid

    def conv(self, name, src, stage, spec: ConvSpec) -> int:
        self.params[f"{name}.weight"] = fan_out_normal(spec.weight_shape, self.rng, self.dtype)
        cfg = {
            "in_channels": spec.in_channels,
            "out_channels": spec.out_channels,
            "kernel": list(spec.kernel),
            "stride": spec.stride,
            "padding": spec.padding,
            "dilation": spec.dilation,
            "groups": spec.groups,
        }
        return self.add(name, "conv2d", [src], stage, cfg, [f"{name}.weight"])

    def bn(self, name, src, stage, channels) -> int:
        state = BNState.create(channels, self.dtype)
        self.bn_states[name] = state
        self.params[f"{name}.gamma"] = state.gamma
        self.params[f"{name}.beta"] = state.beta
        return self.add(name, "batch_norm", [src], stage, {"channels": channels}, [f"{name}.gamma", f"{name}.beta"])

    def smg(self, name, src, stage, cfg: SMGConfig) -> int:
        p = SMGParams.init(cfg, self.rng, self.dtype)
        self.smg_params[name] = p
        names = []
        for key, t in p.named().items():
            self.params[f"{name}.{key}"] = t
            names.append(f"{name}.{key}")
        for key, st in p.bn_states().items():
            self.bn_states[f"{name}.{key}"] = st
        return self.add(name, "smg", [src], stage, asdict(cfg), names)


def build_model(
    config: Union[MacroConfig, str], seed: int = 0, dtype=np.float32
) -> ModelGraph:
    """Instantiate the dataflow graph and seeded parameters for ``config``.

    ``config`` may be a preset name (``"A1"`` … ``"C"``, case-insensitive).
    """
    if isinstance(config, str):
        config = get_preset(config)
    b = _Builder(config, np.random.default_rng(seed), dtype)
    x = b.add("input", "input", [], "stem", {"channels": 3, "resolution": config.input_resolution})

    if config.stem == "cifar":
        c = config.stem_channels
        x = b.conv("stem.conv", x, "stem", ConvSpec(3, c, (3, 3), 1, 1))
    else:
        c_in = 3
        for i, (c, s) in enumerate(((32, 2), (32, 1), (64, 1)), 1):
            x = b.conv(f"stem.conv{i}", x, "stem", ConvSpec(c_in, c, (3, 3), s, 1))
            x = b.bn(f"stem.bn{i}", x, "stem", c)
            x = b.add(f"stem.relu{i}", "relu", [x], "stem")
            c_in = c
        x = b.add("stem.pool", "max_pool", [x], "stem", {"kernel": 3, "stride": 2, "padding": 1})
        c = config.stem_channels

    hp, tp = config.hybrid, config.transition
    for bi, (n, k) in enumerate(config.blocks, 1):
        stage = f"block{bi}"
        feats = [x]
        for mi in range(1, n + 1):
            name = f"{stage}.module{mi}"
            try:
                cfg = SMGConfig(c, k, hp.alpha, hp.g, 1, hp.r_u, hp.r_f)
            except ConfigError as err:
                raise ConfigError(f"{name}: {err}") from None
            feats.append(b.smg(name, x, stage, cfg))
            c += k
            x = b.add(f"{stage}.concat{mi}", "concat", feats, stage, {"channels": c})
        if bi < len(config.blocks):
            name = f"transition{bi}"
            c_out = math.floor(tp.theta * c)
            try:
                cfg = SMGConfig(c, c_out, tp.alpha, tp.g, tp.stride, tp.r_u, tp.r_f)
            except ConfigError as err:
                raise ConfigError(f"{name}: {err}") from None
            x = b.smg(name, x, name, cfg)
            c = c_out

    x = b.bn("head.bn", x, "head", c)
    x = b.add("head.relu", "relu", [x], "head")
    x = b.add("head.pool", "global_avg_pool", [x], "head")
    x = b.add("head.dropout", "dropout", [x], "head", {"rate": config.dropout})
    b.params["head.fc.weight"] = fan_out_normal((config.num_classes, c, 1, 1), b.rng, dtype)
    b.params["head.fc.bias"] = zeros(config.num_classes, dtype)
    x = b.add(
        "head.fc",
        "fully_connected",
        [x],
        "head",
        {"in_features": c, "out_features": config.num_classes, "bias": True},
        ["head.fc.weight", "head.fc.bias"],
    )
    return ModelGraph(config, b.nodes, b.params, b.bn_states, b.smg_params, 0, x)


# ---------------------------------------------------------------------------
# execution


def hybrid_block_forward(
    block_input: Tensor,
    modules: Sequence[tuple[SMGConfig, SMGParams]],
    train: Optional[bool] = None,
) -> Tensor:
    """Dense connectivity: module ``i`` consumes ``concat(input, O_1, ..., O_{i-1})``."""
    feats = [block_input]
    x = block_input
    for i, (cfg, params) in enumerate(modules, 1):
        if x.channels != cfg.in_channels:
            raise ConfigError(
                f"module{i}: expects {cfg.in_channels} input channels, chain provides {x.channels}"
            )
        feats.append(smg_forward(x, cfg, params, train))
        x = ops.concat_channels(feats)
    return x


def _conv_spec(cfg: dict) -> ConvSpec:
    return ConvSpec(
        cfg["in_channels"], cfg["out_channels"], tuple(cfg["kernel"]), cfg["stride"],
        cfg["padding"], cfg["dilation"], cfg["groups"],
    )


def _run_node(model: ModelGraph, node: Node, args: list[Tensor], train, rng, collect):
    kind = node.kind
    if kind == "conv2d":
        return ops.conv2d(args[0], model.params[node.params[0]], spec=_conv_spec(node.config))
    if kind == "batch_norm":
        return ops.batch_norm(args[0], model.bn_states[node.name], train)
    if kind == "relu":
        return ops.relu(args[0])
    if kind == "max_pool":
        return ops.max_pool(args[0], node.config["kernel"], node.config["stride"], node.config["padding"])
    if kind == "smg":
        out = smg_forward(args[0], model.smg_config(node), model.smg_params[node.name], train, collect is not None)
        if collect is not None:
            out, parts = out
            collect[node.name] = parts
        return out
    if kind == "concat":
        return ops.concat_channels(args)
    if kind == "global_avg_pool":
        return ops.global_avg_pool(args[0])
    if kind == "dropout":
        return ops.dropout(args[0], node.config["rate"], rng if train else None)
    if kind == "fully_connected":
        w, b = (model.params[p] for p in node.params)
        return ops.fully_connected(args[0], w, b)
    raise ValueError(f"{node.name}: unknown node kind {kind!r}")


def forward(
    model: ModelGraph,
    batch: Union[Tensor, np.ndarray],
    train: bool = False,
    softmax: bool = False,
    rng: Optional[np.random.Generator] = None,
    collect: Optional[dict] = None,
    node_outputs: Optional[dict] = None,
) -> Tensor:
    """Run the graph on ``batch`` and return ``(N, num_classes, 1, 1)`` logits.

    ``train`` selects batch statistics for BN (and updates running estimates);
    dropout is applied only in train mode and only when ``rng`` is given.
    ``collect`` receives per-SMG intermediate tensors; ``node_outputs``
    receives every node's output shape.
    """
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    res = model.config.input_resolution
    if batch.shape[1:] != (3, res, res):
        raise ShapeError(f"batch shape {batch.shape} does not match (N, 3, {res}, {res})")
    last_use = {}
    for n in model.nodes:
        for src in n.inputs:
            last_use[src] = n.id
    values: dict[int, Tensor] = {model.input_id: batch}
    for node in model.nodes:
        if node.kind == "input":
            out = batch
        else:
            out = _run_node(model, node, [values[i] for i in node.inputs], train, rng, collect)
        values[node.id] = out
        if node_outputs is not None:
            node_outputs[node.name] = out.shape
        for src in node.inputs:
            if last_use.get(src) == node.id and src != model.output_id:
                values.pop(src, None)
    logits = values[model.output_id]
    if softmax:
        logits = ops.softmax_over(logits, {"channel"})
    return logits


# ---------------------------------------------------------------------------
# export


def graph_document(model: ModelGraph) -> dict:
    """Structured description of the graph: nodes, parameter shapes, edges."""
    cfg = model.config
    return {
        "name": cfg.name,
        "config": {
            "stem": cfg.stem,
            "classes": cfg.num_classes,
            "input": cfg.input_resolution,
            "blocks": [{"modules": n, "growth": k} for n, k in cfg.blocks],
            "hybrid": asdict(cfg.hybrid),
            "transition": asdict(cfg.transition),
            "dropout": cfg.dropout,
        },
        "nodes": [
            {
                "id": n.id,
                "name": n.name,
                "kind": n.kind,
                "stage": n.stage,
                "inputs": list(n.inputs),
                "config": n.config,
                "params": {p: list(model.params[p].shape) for p in n.params},
            }
            for n in model.nodes
        ],
        "edges": [list(e) for e in model.edges],
    }
