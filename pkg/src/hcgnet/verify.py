"""Verification harness: finite-difference gradient checks, invariant suite, toy overfit."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import gates, ops
from .analysis import infer_shapes
from .arch import MacroConfig, ModelGraph, build_model, forward, get_preset
from .gates import ForgetGateParams, UpdateGateParams
from .ops import BNState, ConvSpec
from .smg import SMGConfig, SMGParams, smg_forward
from .tensor import GradTape, Tensor, backward

log = logging.getLogger(__name__)

SAMPLE_THRESHOLD = 200
SAMPLE_SIZE = 50


# ---------------------------------------------------------------------------
# gradient checks


@dataclass
class GradCheckReport:
    target: str
    step: float
    dtype: str
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


@dataclass
class GradProblem:
    """A scalar function of named tensors, ready for checking.

    ``fn`` maps the tensor dict to an output tensor; the checked loss is a
    fixed random projection of that output, so no output symmetry can hide a
    wrong gradient.
    """

    name: str
    tensors: dict[str, Tensor]
    fn: Callable[[dict[str, Tensor]], Tensor]


def _loss(problem: GradProblem, proj: dict) -> Tensor:
    out = problem.fn(problem.tensors)
    if "w" not in proj:
        # random signs, magnitudes kept away from zero so no output's gradient
        # path is scaled down into finite-difference noise
        rng = np.random.default_rng(proj["seed"])
        proj["w"] = rng.choice([-1.0, 1.0], size=out.shape) * rng.uniform(0.5, 1.5, size=out.shape)
    return ops.sum_all(out, proj["w"])


def gradcheck(
    target: Union[str, SMGConfig, MacroConfig, GradProblem],
    seed: int = 0,
    tolerance: float = 1e-4,
    step: float = 1e-6,
    dtype=np.float64,
) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``target`` is an op kind name (see :data:`OP_PROBLEMS`), an SMG config, a
    small model config, or a ready :class:`GradProblem`.  The finite-difference
    step is ``step * max(1, |x|)`` per coordinate.  Tensors with more than 200
    entries are checked on a seeded sample of 50 coordinates.
    """
    if np.dtype(dtype) != np.float64:
        raise ValueError("gradient checks need double precision")
    problem = make_problem(target, seed)
    proj = {"seed": seed + 7919}
    with GradTape() as tape:
        tape.watch(*problem.tensors.values())
        loss = _loss(problem, proj)
    grads = backward(tape, loss.grad_id)

    report = GradCheckReport(problem.name, step, "float64", tolerance)
    rng = np.random.default_rng(seed + 104729)
    for name, t in problem.tensors.items():
        g = grads[t.grad_id].data
        flat = t.data.reshape(-1)
        if flat.size > SAMPLE_THRESHOLD:
            coords = rng.choice(flat.size, SAMPLE_SIZE, replace=False)
        else:
            coords = np.arange(flat.size)
        worst = 0.0
        for k in coords:
            orig = flat[k]
            h = step * max(1.0, abs(orig))
            flat[k] = orig + h
            lp = _loss(problem, proj).item()
            flat[k] = orig - h
            lm = _loss(problem, proj).item()
            flat[k] = orig
            num = (lp - lm) / (2 * h)
            ana = float(g.reshape(-1)[k])
            err = rel_error(ana, num)
            worst = max(worst, err)
            if err >= tolerance:
                report.failures.append((name, np.unravel_index(k, t.shape), ana, num))
        report.max_rel_error[name] = worst
    return report


def _rand(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def _randomize_bn(bn: BNState, rng) -> None:
    c = bn.channels
    bn.gamma.data[...] = 1 + 0.5 * rng.standard_normal((1, c, 1, 1))
    bn.beta.data[...] = 0.5 * rng.standard_normal((1, c, 1, 1))
    bn.running_mean[...] = 0.3 * rng.standard_normal(c)
    bn.running_var[...] = 0.5 + rng.random(c)
    bn.mode = "inference"


def calibrate_bn(states, run: Callable[[], object], rng) -> None:
    """Set running statistics near the batch statistics each BN actually sees.

    Randomly drawn running statistics can switch off whole channels behind a
    ReLU, leaving gradients that sit at the finite-difference noise floor.  One
    train-mode pass with momentum 1 records the true statistics; they are then
    jittered slightly so inference mode differs from train mode.
    """
    states = list(states)
    saved = [(s.momentum, s.mode) for s in states]
    for s in states:
        s.momentum, s.mode = 1.0, "train"
    run()
    for s, (mom, _) in zip(states, saved):
        c = s.channels
        s.running_mean[...] += 0.1 * np.sqrt(s.running_var) * rng.standard_normal(c)
        s.running_var[...] = s.running_var * (0.8 + 0.4 * rng.random(c)) + 0.05
        s.momentum, s.mode = mom, "inference"


def randomize_gate_params(p: Union[UpdateGateParams, ForgetGateParams], rng) -> None:
    """Random biases and BN statistics so every gate parameter influences the output."""
    for name, t in p.named().items():
        if name.startswith("ws"):
            # keep the spatial softmax away from saturation: saturated positions get
            # gradients near the finite-difference noise floor
            t.data[...] = rng.standard_normal(t.shape) * 0.3 / np.sqrt(t.shape[1])
        elif name.startswith("W"):
            # fan-in scaling keeps the tanh hidden units out of saturation
            t.data[...] = rng.standard_normal(t.shape) / np.sqrt(t.shape[1])
        elif not name.startswith("bn."):
            t.data[...] = rng.standard_normal(t.shape) * 0.5
    _randomize_bn(p.bn, rng)


def randomize_smg_params(p: SMGParams, rng) -> None:
    for bn in p.bn_states().values():
        _randomize_bn(bn, rng)
    randomize_gate_params(p.update, rng)
    randomize_gate_params(p.forget, rng)


def _named_smg(p: SMGParams) -> dict[str, Tensor]:
    return {k: v for k, v in p.named().items()}


def _op_problems(rng) -> dict[str, Callable[[], GradProblem]]:
    """Factories for one problem per differentiable op kind."""

    def conv(spec: ConvSpec, hw=6, n=2, method="auto", bias=False):
        def make():
            t = {"x": _rand(rng, (n, spec.in_channels, hw, hw)), "w": _rand(rng, spec.weight_shape)}
            if bias:
                t["b"] = _rand(rng, (1, spec.out_channels, 1, 1))
            return GradProblem(
                f"conv2d[{spec.kernel[0]}x{spec.kernel[1]} s{spec.stride} p{spec.padding} "
                f"d{spec.dilation} g{spec.groups} {method}]",
                t,
                lambda t: ops.conv2d(t["x"], t["w"], t.get("b"), spec=spec, method=method),
            )
        return make

    def bn(train: bool):
        def make():
            st = BNState.create(3, np.float64)
            _randomize_bn(st, rng)
            t = {"x": _rand(rng, (4, 3, 3, 3)), "gamma": st.gamma, "beta": st.beta}
            return GradProblem(
                f"batch_norm[{'train' if train else 'inference'}]",
                t,
                lambda t: ops.batch_norm(t["x"], st, train),
            )
        return make

    def unary(kind, fn, shape=(2, 3, 4, 4), scale=1.0):
        return lambda: GradProblem(kind, {"x": _rand(rng, shape, scale)}, lambda t: fn(t["x"]))

    def binary(kind, fn, sa, sb):
        return lambda: GradProblem(kind, {"a": _rand(rng, sa), "b": _rand(rng, sb)}, lambda t: fn(t["a"], t["b"]))

    def branch_softmax():
        t = {"a": _rand(rng, (2, 5, 1, 1)), "b": _rand(rng, (2, 5, 1, 1))}

        def fn(t):
            a, b = ops.softmax_over([t["a"], t["b"]], {"branch"})
            return ops.concat_channels([a, b])

        return GradProblem("softmax[branch]", t, fn)

    def attention_pool():
        t = {"x": _rand(rng, (2, 4, 5, 5)), "ws": _rand(rng, (1, 4, 1, 1), 0.15)}
        return GradProblem("spatial_attention_pool", t, lambda t: gates.spatial_attention_pool(t["x"], t["ws"]))

    def update():
        p = UpdateGateParams.init(6, 2, rng, np.float64)
        randomize_gate_params(p, rng)
        t = {"x33": _rand(rng, (2, 6, 4, 4)), "x55": _rand(rng, (2, 6, 4, 4)), **p.named()}
        calibrate_bn([p.bn], lambda: gates.update_gate(t["x33"], t["x55"], p), rng)
        return GradProblem("update_gate", t, lambda t: gates.update_gate(t["x33"], t["x55"], p))

    def forget():
        p = ForgetGateParams.init(6, 2, rng, np.float64)
        randomize_gate_params(p, rng)
        t = {"x": _rand(rng, (2, 6, 4, 4)), **p.named()}
        calibrate_bn([p.bn], lambda: gates.forget_gate(t["x"], p), rng)
        return GradProblem("forget_gate", t, lambda t: gates.forget_gate(t["x"], p))

    def fc():
        t = {"x": _rand(rng, (3, 10, 1, 1)), "w": _rand(rng, (5, 10, 1, 1)), "b": _rand(rng, (1, 5, 1, 1))}
        return GradProblem("fully_connected", t, lambda t: ops.fully_connected(t["x"], t["w"], t["b"]))

    def xent():
        labels = rng.integers(0, 4, size=3)
        return GradProblem(
            "cross_entropy", {"z": _rand(rng, (3, 4, 1, 1))}, lambda t: ops.cross_entropy(t["z"], labels)
        )

    def drop():
        seed = int(rng.integers(1 << 31))
        return GradProblem(
            "dropout",
            {"x": _rand(rng, (2, 3, 4, 4))},
            lambda t: ops.dropout(t["x"], 0.3, np.random.default_rng(seed)),
        )

    return {
        "conv2d": conv(ConvSpec(4, 6, (3, 3), 1, 1, groups=2), method="im2col"),
        "conv2d_direct": conv(ConvSpec(4, 6, (3, 3), 2, 1, groups=2), method="direct"),
        "conv2d_dilated_grouped": conv(ConvSpec(4, 4, (3, 3), 1, 2, dilation=2, groups=2)),
        "conv2d_depthwise": conv(ConvSpec(4, 4, (3, 3), 1, 1, groups=4)),
        "conv2d_depthwise_dilated": conv(ConvSpec(4, 4, (3, 3), 1, 2, dilation=2, groups=4)),
        "conv2d_pointwise_bias": conv(ConvSpec(4, 3, (1, 1), bias=True), bias=True),
        "conv2d_stride2": conv(ConvSpec(3, 4, (3, 3), 2, 1), hw=8),
        "batch_norm": bn(True),
        "batch_norm_inference": bn(False),
        "relu": unary("relu", ops.relu),
        # half-scale inputs stay off the flat tails, where the derivative is
        # small next to the activation's own rounding error
        "tanh": unary("tanh", ops.tanh, scale=0.5),
        "sigmoid": unary("sigmoid", ops.sigmoid, scale=0.5),
        "softmax_spatial": unary("softmax[height,width]", lambda x: ops.softmax_over(x, {"height", "width"})),
        "softmax_channel": unary("softmax[channel]", lambda x: ops.softmax_over(x, {"channel"})),
        "softmax_branch": branch_softmax,
        "concat": binary("concat", lambda a, b: ops.concat_channels([a, b]), (2, 3, 4, 4), (2, 2, 4, 4)),
        "slice": unary("slice", lambda x: ops.slice_channels(x, 1, 3)),
        "add": binary("add", ops.add, (2, 3, 4, 4), (2, 3, 1, 1)),
        "broadcast_mul": binary("broadcast_mul", ops.broadcast_mul, (2, 3, 4, 4), (2, 3, 1, 1)),
        "spatial_weighted_sum": binary("spatial_weighted_sum", ops.spatial_weighted_sum, (2, 3, 4, 4), (2, 1, 4, 4)),
        "max_pool": unary("max_pool", lambda x: ops.max_pool(x), (2, 3, 7, 7)),
        "global_avg_pool": unary("global_avg_pool", ops.global_avg_pool),
        "fully_connected": fc,
        "cross_entropy": xent,
        "dropout": drop,
        "spatial_attention_pool": attention_pool,
        "update_gate": update,
        "forget_gate": forget,
    }


OP_PROBLEMS = tuple(_op_problems(np.random.default_rng(0)))

# graph node kind -> op problems covering it
NODE_KIND_PROBLEMS = {
    "conv2d": ("conv2d", "conv2d_direct", "conv2d_stride2"),
    "batch_norm": ("batch_norm", "batch_norm_inference"),
    "relu": ("relu",),
    "max_pool": ("max_pool",),
    "smg": ("smg",),
    "concat": ("concat",),
    "global_avg_pool": ("global_avg_pool",),
    "dropout": ("dropout",),
    "fully_connected": ("fully_connected",),
}


def smg_problem(cfg: SMGConfig, seed: int, hw: int = 4, batch: int = 2) -> GradProblem:
    rng = np.random.default_rng(seed)
    p = SMGParams.init(cfg, rng, np.float64)
    randomize_smg_params(p, rng)
    x = _rand(rng, (batch, cfg.in_channels, hw, hw))
    calibrate_bn(p.bn_states().values(), lambda: smg_forward(x, cfg, p), rng)
    t = {"x": x, **_named_smg(p)}
    name = f"smg[{cfg.in_channels}->{cfg.out_channels} g{cfg.groups} a{cfg.alpha} s{cfg.stride}]"
    return GradProblem(name, t, lambda t: smg_forward(t["x"], cfg, p))


def model_problem(config: MacroConfig, seed: int, batch: int = 2) -> GradProblem:
    model = build_model(config, seed, np.float64)
    rng = np.random.default_rng(seed)
    for bn in model.bn_states.values():
        _randomize_bn(bn, rng)
    for p in model.smg_params.values():
        randomize_gate_params(p.update, rng)
        randomize_gate_params(p.forget, rng)
    res = config.input_resolution
    x = _rand(rng, (batch, 3, res, res))
    calibrate_bn(model.bn_states.values(), lambda: forward(model, x, train=True), rng)
    t = {"input": x, **model.params}
    return GradProblem(f"model[{config.name}]", t, lambda t: forward(model, t["input"]))


def make_problem(target, seed: int = 0) -> GradProblem:
    if isinstance(target, GradProblem):
        return target
    if isinstance(target, SMGConfig):
        return smg_problem(target, seed)
    if isinstance(target, MacroConfig):
        return model_problem(target, seed)
    if target == "smg":
        return smg_problem(SMGConfig(16, 8, 4, 4), seed)
    factories = _op_problems(np.random.default_rng(seed))
    if target not in factories:
        raise KeyError(f"no gradient problem for {target!r}; known: {sorted(factories) + ['smg']}")
    return factories[target]()


def graph_op_kinds(model: ModelGraph) -> set[str]:
    return {n.kind for n in model.nodes if n.kind != "input"}


def gradcheck_graph(model: ModelGraph, seed: int = 0, tolerance: float = 1e-4) -> list[GradCheckReport]:
    """Gradient-check every op kind that occurs in ``model``."""
    reports = []
    for kind in sorted(graph_op_kinds(model)):
        for prob in NODE_KIND_PROBLEMS[kind]:
            reports.append(gradcheck(prob, seed, tolerance))
    return reports


# ---------------------------------------------------------------------------
# invariant suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float
    detail: str = ""


@dataclass
class InvariantReport:
    model: str
    seed: int
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_name(self) -> dict[str, CheckResult]:
        return {c.name: c for c in self.checks}


def run_invariant_suite(
    model: Union[ModelGraph, MacroConfig, str],
    seed: int = 0,
    batch: int = 2,
    dtype=np.float32,
) -> InvariantReport:
    """Seeded random instantiation and batch; every check reported, none raised."""
    if isinstance(model, (str, MacroConfig)):
        model = build_model(model, seed, dtype)
    if not model.nodes:
        raise ValueError("cannot run the invariant suite on an empty model")
    dtype = next(iter(model.params.values())).dtype
    tol = 1e-12 if dtype == np.float64 else 1e-6
    rng = np.random.default_rng(seed)
    res = model.config.input_resolution
    x = Tensor(rng.standard_normal((batch, 3, res, res)).astype(dtype))
    parts: dict[str, dict] = {}
    executed: dict[str, tuple] = {}
    forward(model, x, collect=parts, node_outputs=executed)
    report = InvariantReport(model.config.name, seed)

    # spatial softmax inside every attention pool
    worst = 0.0
    for name, p in parts.items():
        sp = model.smg_params[name]
        for key, w in (("x33", sp.update.ws33), ("x55", sp.update.ws55), ("x_reused", sp.forget.wsf)):
            feat = p[key]
            logits = ops.conv2d(feat, w, spec=ConvSpec(feat.channels, 1, (1, 1)))
            s = ops.softmax_over(logits, {"height", "width"}).data
            worst = max(worst, float(np.abs(s.sum(axis=(2, 3)) - 1).max()))
            if s.min() < 0:
                worst = max(worst, 1.0)
    report.checks.append(CheckResult("softmax-normalization", worst <= tol, worst))

    worst, inside = 0.0, True
    for p in parts.values():
        u33, u55 = p["u33"].data, p["u55"].data
        worst = max(worst, float(np.abs(u33 + u55 - 1).max()))
        inside &= bool((u33 > 0).all() and (u33 < 1).all() and (u55 > 0).all() and (u55 < 1).all())
    report.checks.append(
        CheckResult("branch-sum-to-one", worst <= tol and inside, worst, "" if inside else "weight outside (0, 1)")
    )

    fmin = min(float(p["f"].data.min()) for p in parts.values())
    fmax = max(float(p["f"].data.max()) for p in parts.values())
    report.checks.append(
        CheckResult("forget-range", 0 < fmin and fmax < 1, max(0.0, -fmin, fmax - 1), f"min {fmin:.3g} max {fmax:.3g}")
    )

    table = infer_shapes(model)
    shapes = table.by_name()
    mismatches = 0
    by_id = {r.node_id: r for r in table}
    for n in model.nodes:
        if n.kind != "smg" or not n.stage.startswith("block"):
            continue
        i = int(n.name.rsplit("module", 1)[1])
        bi = int(n.stage[len("block"):])
        n_mod, k = model.config.blocks[bi - 1]
        first = model.node(f"{n.stage}.module1")
        c0 = by_id[first.inputs[0]].shape[1]
        if shapes[n.name][1] != k or by_id[n.inputs[0]].shape[1] != c0 + (i - 1) * k:
            mismatches += 1
    report.checks.append(CheckResult("channel-bookkeeping", mismatches == 0, float(mismatches)))

    bad = [name for name, shp in shapes.items() if executed[name][1:] != shp[1:]]
    ladder = table.resolution_ladder()
    block_ladder = ladder[2:] if model.config.stem == "imagenet" else ladder[1:]
    halving = all(b == a // 2 for a, b in zip(block_ladder, block_ladder[1:]))
    report.checks.append(
        CheckResult(
            "shape-ladder",
            not bad and halving,
            float(len(bad)),
            f"ladder {ladder}" + (f"; static/executed disagree at {bad[:3]}" if bad else ""),
        )
    )
    return report


# ---------------------------------------------------------------------------
# toy overfitting


TOY_CONFIG = MacroConfig("toy", "cifar", ((2, 8), (2, 16)), 10, 8)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class OverfitTrace:
    losses: list[float]
    accuracies: list[float]
    final_accuracy: float
    final_inference_accuracy: float


def synthetic_dataset(n: int = 32, classes: int = 10, resolution: int = 8, seed: int = 0, dtype=np.float64):
    """Seeded Gaussian images with fixed random labels."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3, resolution, resolution)).astype(dtype)
    y = rng.integers(0, classes, size=n)
    return x, y


def _accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float((logits.data[:, :, 0, 0].argmax(axis=1) == labels).mean())


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average; traces shorter than ``window`` use their full length."""
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(values)))
    return np.convolve(values, np.ones(window) / window, mode="valid")


def overfit_toy(
    config: MacroConfig = TOY_CONFIG,
    steps: int = 500,
    lr: float = 0.1,
    momentum: float = 0.9,
    seed: int = 0,
    n_samples: int = 32,
    dtype=np.float64,
) -> OverfitTrace:
    """Full-batch SGD with momentum on a fixed synthetic set; returns the loss trace."""
    x, y = synthetic_dataset(n_samples, config.num_classes, config.input_resolution, seed, dtype)
    model = build_model(config, seed, dtype)
    batch = Tensor(x)
    params = list(model.params.values())
    velocity = [np.zeros_like(p.data) for p in params]
    losses, accs = [], []
    for step in range(steps):
        with GradTape() as tape:
            tape.watch(*params)
            logits = forward(model, batch, train=True)
            loss = ops.cross_entropy(logits, y)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        losses.append(value)
        accs.append(_accuracy(logits, y))
        grads = backward(tape, loss.grad_id)
        for p, v in zip(params, velocity):
            v *= momentum
            v += grads[p.grad_id].data
            p.data -= lr * v
    final = _accuracy(forward(model, batch, train=True), y)
    final_inf = _accuracy(forward(model, batch, train=False), y)
    return OverfitTrace(losses, accs, final, final_inf)
