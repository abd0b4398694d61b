"""Static shape inference and parameter / MAC accounting over a ModelGraph.

Nothing here touches tensor data: shapes come from convolution arithmetic and
costs from closed-form per-layer formulas.  One FLOP in the headline numbers
is one multiply-accumulate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

from .arch import ModelGraph, Node, _conv_spec
from .ops import ConvSpec, ShapeError
from .smg import ConfigError, SMGConfig, smg_cost

Shape = tuple[int, int, int, int]


@dataclass(frozen=True)
class ShapeRecord:
    node_id: int
    name: str
    kind: str
    stage: str
    shape: Shape
    inputs: tuple[int, ...] = ()


@dataclass
class ShapeTable:
    records: list[ShapeRecord]

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def by_name(self) -> dict[str, Shape]:
        return {r.name: r.shape for r in self.records}

    def resolution_ladder(self) -> list[int]:
        """Spatial size of the network input, the max-pool input (if any), and each block input."""
        shape_of = {r.node_id: r.shape for r in self.records}
        ladder = []
        for r in self.records:
            if r.kind == "input" or (r.kind == "max_pool") or (
                r.kind == "smg" and r.name.endswith(".module1")
            ):
                src = r.shape if r.kind == "input" else shape_of[r.inputs[0]]
                ladder.append(src[2])
        return ladder


@dataclass(frozen=True)
class NodeCost:
    name: str
    kind: str
    stage: str
    shape: Shape
    params: int
    macs: int
    non_mac_ops: int


def stage_group(stage: str) -> str:
    if stage.startswith("block"):
        return "blocks"
    if stage.startswith("transition"):
        return "transitions"
    return stage


@dataclass
class CostReport:
    model: str
    input_resolution: int
    nodes: list[NodeCost]
    stages: dict[str, dict[str, int]] = field(default_factory=dict)
    groups: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        for n in self.nodes:
            for table, key in ((self.stages, n.stage), (self.groups, stage_group(n.stage))):
                acc = table.setdefault(key, {"params": 0, "macs": 0, "non_mac_ops": 0})
                acc["params"] += n.params
                acc["macs"] += n.macs
                acc["non_mac_ops"] += n.non_mac_ops

    @property
    def total_params(self) -> int:
        return sum(n.params for n in self.nodes)

    @property
    def total_macs(self) -> int:
        return sum(n.macs for n in self.nodes)

    @property
    def total_non_mac_ops(self) -> int:
        return sum(n.non_mac_ops for n in self.nodes)


def _elements(shape) -> int:
    n, c, h, w = shape
    return n * c * h * w


def _node_shape_and_cost(model: ModelGraph, node: Node, in_shapes: list[Shape], res: int):
    """Return ``(output_shape, params, macs, non_mac_ops)`` for one node at batch 1."""
    kind, cfg = node.kind, node.config
    if kind == "input":
        return (1, cfg["channels"], res, res), 0, 0, 0
    x = in_shapes[0]
    if kind == "conv2d":
        spec = _conv_spec(cfg)
        if x[1] != spec.in_channels:
            raise ShapeError(f"expects {spec.in_channels} channels, gets {x[1]}")
        ho, wo = spec.output_hw(x[2], x[3])
        return (1, spec.out_channels, ho, wo), spec.num_params, spec.macs(x[2], x[3]), 0
    if kind == "batch_norm":
        return x, 2 * cfg["channels"], 0, _elements(x)
    if kind == "relu":
        return x, 0, 0, _elements(x)
    if kind == "max_pool":
        k, s, p = cfg["kernel"], cfg["stride"], cfg["padding"]
        spec = ConvSpec(x[1], x[1], (k, k), s, p, groups=x[1])
        ho, wo = spec.output_hw(x[2], x[3])
        out = (1, x[1], ho, wo)
        return out, 0, 0, _elements(out)
    if kind == "smg":
        scfg = SMGConfig(**cfg)
        if x[1] != scfg.in_channels:
            raise ShapeError(f"expects {scfg.in_channels} channels, gets {x[1]}")
        ho, wo = scfg.output_hw(x[2], x[3])
        cost = smg_cost(scfg, x[2], x[3])
        return (1, scfg.out_channels, ho, wo), cost.params, cost.macs, cost.non_mac_ops
    if kind == "concat":
        if any(s[2:] != x[2:] for s in in_shapes):
            raise ShapeError(f"concat inputs disagree spatially: {in_shapes}")
        return (1, sum(s[1] for s in in_shapes), x[2], x[3]), 0, 0, 0
    if kind == "global_avg_pool":
        return (1, x[1], 1, 1), 0, 0, _elements(x)
    if kind == "dropout":
        return x, 0, 0, 0
    if kind == "fully_connected":
        if x[1] != cfg["in_features"] or x[2:] != (1, 1):
            raise ShapeError(f"expects ({cfg['in_features']}, 1, 1) descriptor, gets {x}")
        fi, fo = cfg["in_features"], cfg["out_features"]
        return (1, fo, 1, 1), fi * fo + (fo if cfg["bias"] else 0), fi * fo, 0
    raise ValueError(f"unknown node kind {kind!r}")


def _walk(model: ModelGraph, res: Optional[int]):
    if not model.nodes:
        raise ValueError("empty model")
    res = model.config.input_resolution if res is None else res
    if res < 1:
        raise ShapeError(f"input resolution must be positive, got {res}")
    shapes: dict[int, Shape] = {}
    rows = []
    for node in model.nodes:
        try:
            out, p, m, nm = _node_shape_and_cost(model, node, [shapes[i] for i in node.inputs], res)
        except (ShapeError, ConfigError) as err:
            raise ShapeError(f"{node.name}: {err} (input resolution {res})") from None
        shapes[node.id] = out
        rows.append((node, out, p, m, nm))
    return res, rows


def infer_shapes(model: ModelGraph, input_resolution: Optional[int] = None) -> ShapeTable:
    """Per-node output shapes (batch 1) from arithmetic alone."""
    _, rows = _walk(model, input_resolution)
    return ShapeTable([ShapeRecord(n.id, n.name, n.kind, n.stage, out, n.inputs) for n, out, *_ in rows])


def cost_report(model: ModelGraph, input_resolution: Optional[int] = None) -> CostReport:
    res, rows = _walk(model, input_resolution)
    nodes = [NodeCost(n.name, n.kind, n.stage, out, p, m, nm) for n, out, p, m, nm in rows]
    return CostReport(model.config.name, res, nodes)


def count_params(model: ModelGraph) -> CostReport:
    """Parameter accounting (inference view: BN running statistics excluded)."""
    return cost_report(model)


def count_flops(model: ModelGraph, input_resolution: Optional[int] = None) -> CostReport:
    return cost_report(model, input_resolution)


# ---------------------------------------------------------------------------
# reference figures and tolerance checks

# Published parameter counts (millions) and MACs (billions) per variant, with
# the input resolution the MAC figure refers to.
PAPER_TARGETS: dict[str, dict[str, float]] = {
    "A1": {"params_m": 1.1, "gflops": 0.2, "input": 32},
    "A2": {"params_m": 3.1, "gflops": 0.5, "input": 32},
    "A3": {"params_m": 11.4, "gflops": 2.0, "input": 32},
    "B": {"params_m": 12.9, "gflops": 2.0, "input": 224},
    "C": {"params_m": 42.2, "gflops": 7.1, "input": 224},
}

DEFAULT_TOL_PARAMS = 5.0  # percent
DEFAULT_TOL_FLOPS = 15.0


@dataclass(frozen=True)
class TargetCheck:
    metric: str
    target: float
    actual: float
    deviation_pct: float
    tolerance_pct: float

    @property
    def ok(self) -> bool:
        return abs(self.deviation_pct) <= self.tolerance_pct


def check_targets(
    report: CostReport,
    preset: str,
    tol_params: float = DEFAULT_TOL_PARAMS,
    tol_flops: float = DEFAULT_TOL_FLOPS,
) -> list[TargetCheck]:
    t = PAPER_TARGETS[preset.upper()]
    checks = []
    p = report.total_params / 1e6
    checks.append(TargetCheck("params_m", t["params_m"], p, 100 * (p / t["params_m"] - 1), tol_params))
    if report.input_resolution == t["input"]:
        g = report.total_macs / 1e9
        checks.append(TargetCheck("gflops", t["gflops"], g, 100 * (g / t["gflops"] - 1), tol_flops))
    return checks


# ---------------------------------------------------------------------------
# reports


def _stanzas(report: CostReport) -> list[dict]:
    out: list[dict] = []
    for n in report.nodes:
        if not out or out[-1]["name"] != n.stage:
            kind = stage_group(n.stage)
            out.append({"name": n.stage, "kind": kind.rstrip("s") if kind != "head" else kind, "nodes": []})
        out[-1]["nodes"].append(
            {
                "name": n.name,
                "kind": n.kind,
                "stage": n.stage,
                "shape": list(n.shape),
                "params": n.params,
                "macs": n.macs,
                "non_mac_ops": n.non_mac_ops,
            }
        )
    for st in out:
        st.update(report.stages[st["name"]])
    return out


def structured_report(report: CostReport, checks: Optional[list[TargetCheck]] = None) -> dict:
    doc = {
        "name": report.model,
        "input": report.input_resolution,
        "stages": _stanzas(report),
        "groups": report.groups,
        "totals": {
            "params": report.total_params,
            "macs": report.total_macs,
            "non_mac_ops": report.total_non_mac_ops,
        },
    }
    if checks is not None:
        doc["checks"] = [{**asdict(c), "ok": c.ok} for c in checks]
    return doc


def text_report(report: CostReport, checks: Optional[list[TargetCheck]] = None) -> str:
    lines = [f"{report.model} @ {report.input_resolution}x{report.input_resolution}", ""]
    header = f"{'node':<28} {'kind':<16} {'output shape':<20} {'params':>12} {'MACs':>16}"
    lines += [header, "-" * len(header)]
    for st in _stanzas(report):
        lines.append(f"[{st['name']}]")
        for n in st["nodes"]:
            shape = "x".join(str(d) for d in n["shape"][1:])
            lines.append(f"  {n['name']:<26} {n['kind']:<16} {shape:<20} {n['params']:>12,} {n['macs']:>16,}")
        lines.append(f"  {'subtotal':<26} {'':<16} {'':<20} {st['params']:>12,} {st['macs']:>16,}")
    lines.append("")
    for g, acc in report.groups.items():
        lines.append(f"{g:<12} params {acc['params']:>12,}  MACs {acc['macs']:>16,}")
    lines.append(
        f"{'total':<12} params {report.total_params:>12,}  MACs {report.total_macs:>16,}"
        f"  non-MAC ops {report.total_non_mac_ops:,}"
    )
    lines.append(f"{'':<12} = {report.total_params / 1e6:.2f}M params, {report.total_macs / 1e9:.3f}G MACs")
    if checks:
        lines.append("")
        for c in checks:
            lines.append(
                f"{'PASS' if c.ok else 'FAIL'} {c.metric}: {c.actual:.3f} vs {c.target} "
                f"({c.deviation_pct:+.1f}%, tolerance {c.tolerance_pct:g}%)"
            )
    return "\n".join(lines) + "\n"


def summarize(
    model: ModelGraph,
    input_resolution: Optional[int] = None,
    fmt: str = "text",
    checks: Optional[list[TargetCheck]] = None,
) -> str:
    report = cost_report(model, input_resolution)
    if fmt == "text":
        return text_report(report, checks)
    if fmt == "structured":
        return json.dumps(structured_report(report, checks), indent=2) + "\n"
    raise ValueError(f"unknown format {fmt!r}")
