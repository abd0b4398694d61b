"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed at the end of the
pytest run (see conftest.py) or directly when this file is executed as a script.
"""

import os
import subprocess
import sys
import time

import numpy as np

from hcgnet import analysis, verify
from hcgnet.arch import PRESETS, build_model, forward
from hcgnet.cli import run as cli_run
from hcgnet.gates import ForgetGateParams, UpdateGateParams, forget_gate, update_gate
from hcgnet.ops import ConvSpec, conv2d
from hcgnet.smg import SMGConfig
from hcgnet.tensor import Tensor

from oracles import embed_dilated, naive_conv2d

RESULTS: dict[int, str] = {}

PARAM_TARGETS = {"A1": 1.1, "A2": 3.1, "A3": 11.4, "B": 12.9, "C": 42.2}
FLOP_TARGETS = {"A1": (0.2, 32), "A2": (0.5, 32), "A3": (2.0, 32), "B": (2.0, 224), "C": (7.1, 224)}


def record(num: int, ok: bool, text: str) -> None:
    RESULTS[num] = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {text}"


def test_1_parameter_counts():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, target in PARAM_TARGETS.items():
        m = analysis.count_params(build_model(name)).total_params / 1e6
        dev = 100 * (m / target - 1)
        ok &= abs(dev) <= 5.0
        parts.append(f"{name} {m:.3f}M ({dev:+.1f}%)")
    record(1, ok, f"params within 5%: {', '.join(parts)} [{time.perf_counter() - t0:.1f}s]")
    assert ok


def test_2_flop_counts():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, (target, res) in FLOP_TARGETS.items():
        g = analysis.count_flops(build_model(name), res).total_macs / 1e9
        dev = 100 * (g / target - 1)
        good = abs(dev) <= 15.0
        ok &= good
        parts.append(f"{name} {g:.3f}G@{res} ({dev:+.1f}%{'' if good else ' OUT'})")
    record(2, ok, f"MACs within 15%: {', '.join(parts)} [{time.perf_counter() - t0:.1f}s]")
    assert ok


def test_3_shape_ladder_b():
    t0 = time.perf_counter()
    model = build_model("b")
    expected = [224, 112, 56, 28, 14, 7]
    table = analysis.infer_shapes(model, 224)
    static = table.resolution_ladder()
    executed: dict = {}
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 224, 224)).astype(np.float32))
    logits = forward(model, x, node_outputs=executed)
    by_id = {n.id: n.name for n in model.nodes}
    run_ladder = [224, executed["stem.relu3"][2]] + [
        executed[by_id[model.node(f"block{i}.module1").inputs[0]]][2] for i in range(1, 5)
    ]
    elapsed = time.perf_counter() - t0
    ok = static == expected and run_ladder == expected and executed == table.by_name() and elapsed < 60
    record(3, ok, f"static {static}, executed {run_ladder}, logits {logits.shape} [{elapsed:.1f}s]")
    assert ok


def _random_gate_case(rng):
    c = int(rng.integers(1, 17))
    n = int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 8)), int(rng.integers(1, 8))
    r_u, r_f = float(rng.choice([1, 2, 4, 8])), float(rng.choice([1, 2, 4, 8]))
    up = UpdateGateParams.init(c, r_u, rng, np.float64)
    fg = ForgetGateParams.init(c, r_f, rng, np.float64)
    scale = float(rng.uniform(0.1, 3.0))
    for p in (up, fg):
        for t in p.named().values():
            t.data[...] = rng.standard_normal(t.shape) * scale
        p.bn.running_mean[...] = rng.standard_normal(p.hidden)
        p.bn.running_var[...] = 0.1 + rng.random(p.hidden) * 2
    train = bool(rng.integers(0, 2)) and n > 1
    xs = [Tensor(rng.standard_normal((n, c, h, w)) * float(rng.uniform(0.1, 5.0))) for _ in range(3)]
    return up, fg, xs, train


def test_4_gate_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_sum, f_lo, f_hi, inside = 0.0, 1.0, 0.0, True
    for _ in range(1000):
        up, fg, (x33, x55, xp), train = _random_gate_case(rng)
        _, (u33, u55) = update_gate(x33, x55, up, train=train, return_weights=True)
        f = forget_gate(xp, fg, train=train).data
        worst_sum = max(worst_sum, float(np.abs(u33.data + u55.data - 1).max()))
        f_lo, f_hi = min(f_lo, float(f.min())), max(f_hi, float(f.max()))
        inside &= bool((f > 0).all() and (f < 1).all())
    elapsed = time.perf_counter() - t0
    ok = worst_sum <= 1e-12 and inside
    record(4, ok, f"1000 gate evals: max |u33+u55-1| = {worst_sum:.1e}, f in [{f_lo:.3g}, {f_hi:.6g}] [{elapsed:.1f}s]")
    assert ok


# stride, padding, dilation, group mode for every convolution kind in the presets
CONV_COMBOS = [
    (3, 1, 1, 1, "dense"),
    (3, 2, 1, 1, "dense"),
    (1, 1, 0, 1, "dense"),
    (3, 1, 1, 1, "grouped"),
    (3, 2, 1, 1, "grouped"),
    (3, 1, 1, 1, "depthwise"),
    (3, 1, 2, 2, "depthwise"),
]


def test_5_conv_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(100):
        k, s, p, d, mode = CONV_COMBOS[i % len(CONV_COMBOS)]
        n, cin, cout = (int(v) for v in rng.integers(1, 5, size=3))
        hw = int(rng.integers(3, 9))
        if mode == "depthwise":
            spec = ConvSpec(cin, cin, (k, k), s, p, d, groups=cin)
        elif mode == "grouped":
            g = int(rng.choice([2, 4]))
            spec = ConvSpec(g * max(1, cin // 2), g * max(1, cout // 2), (k, k), s, p, d, groups=g)
        else:
            spec = ConvSpec(cin, cout, (k, k), s, p, d)
        x = rng.standard_normal((n, spec.in_channels, hw, hw))
        w = rng.standard_normal(spec.weight_shape)
        ref = naive_conv2d(x, w, s, p, d, spec.groups)
        for method in ("direct", "im2col"):
            out = conv2d(Tensor(x), Tensor(w), spec=spec, method=method).data
            worst = max(worst, float(np.abs(out - ref).max()))
    c = 6
    x = rng.standard_normal((2, c, 9, 9))
    w3 = rng.standard_normal((c, 1, 3, 3))
    dil = conv2d(Tensor(x), Tensor(w3), spec=ConvSpec(c, c, (3, 3), 1, 2, 2, groups=c), method="direct").data
    emb = conv2d(Tensor(x), Tensor(embed_dilated(w3)), spec=ConvSpec(c, c, (5, 5), 1, 2, groups=c), method="direct").data
    exact = bool(np.array_equal(dil, emb))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and exact and elapsed < 120
    record(5, ok, f"100 conv instances x 2 methods: max abs err {worst:.1e}; dilated == embedded 5x5: {exact} [{elapsed:.1f}s]")
    assert ok


def test_6_gradient_checks():
    t0 = time.perf_counter()
    failed, worst = [], 0.0
    for kind in verify.OP_PROBLEMS:
        r = verify.gradcheck(kind, seed=0)
        worst = max(worst, r.worst)
        if not r.passed:
            failed.append(kind)
    smg = verify.gradcheck(SMGConfig(16, 8, alpha=4, groups=4), seed=0)
    elapsed = time.perf_counter() - t0
    ok = not failed and smg.passed and elapsed < 300
    record(
        6,
        ok,
        f"{len(verify.OP_PROBLEMS)} op kinds (worst {worst:.1e}{', failed ' + str(failed) if failed else ''}), "
        f"SMG 16->8 module {'pass' if smg.passed else 'FAIL'} (worst {smg.worst:.1e}) [{elapsed:.1f}s]",
    )
    assert ok


def test_7_trainability():
    t0 = time.perf_counter()
    first = verify.overfit_toy(steps=500, lr=0.1, seed=0)
    elapsed = time.perf_counter() - t0
    again = verify.overfit_toy(steps=500, lr=0.1, seed=0)
    smooth = verify.smoothed(first.losses, 20)
    monotone = bool(np.all(np.diff(smooth) <= 0))
    identical = first.losses == again.losses and first.accuracies == again.accuracies
    ok = first.final_accuracy >= 0.95 and monotone and identical and elapsed < 300
    record(
        7,
        ok,
        f"train acc {first.final_accuracy:.3f} (inference-BN {first.final_inference_accuracy:.3f}), "
        f"loss {first.losses[0]:.3f} -> {first.losses[-1]:.2e}, smoothed monotone {monotone}, "
        f"rerun bit-identical {identical} [{elapsed:.1f}s per run]",
    )
    assert ok


def _cli(argv):
    import io

    out = io.StringIO()
    cli_run(argv, stdout=out, stderr=io.StringIO())
    return out.getvalue()


def _subprocess(argv, hashseed):
    env = dict(os.environ, PYTHONHASHSEED=str(hashseed))
    proc = subprocess.run([sys.executable, "-m", "hcgnet", *argv], capture_output=True, env=env, timeout=300)
    return proc.stdout


def test_8_determinism():
    t0 = time.perf_counter()
    same = True
    n = 0
    for preset in sorted(PRESETS):
        for argv in (
            ["summarize", "--preset", preset.lower()],
            ["summarize", "--preset", preset.lower(), "--format", "structured"],
            ["export", "--preset", preset.lower()],
        ):
            same &= _cli(argv) == _cli(argv)
            n += 1
    for argv in (["summarize", "--preset", "b", "--format", "structured"], ["export", "--preset", "a1"]):
        a, b = _subprocess(argv, 1), _subprocess(argv, 2)
        same &= a == b and len(a) > 0
    record(8, same, f"{n} in-process invocation pairs and 2 cross-process pairs byte-identical: {same} [{time.perf_counter() - t0:.1f}s]")
    assert same


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for fn in tests:
        try:
            fn()
        except AssertionError:
            pass
    for _, line in sorted(RESULTS.items()):
        print(line)
    sys.exit(0 if all(line.startswith("[PASS]") for line in RESULTS.values()) else 1)
