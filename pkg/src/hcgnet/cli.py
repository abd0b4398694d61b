"""Command-line entry point: ``hcgnet {summarize,verify,gradcheck,overfit,export}``.

Exit codes: 0 success, 1 usage error, 2 bad config (or a config that cannot
run at the requested resolution), 3 a tolerance or verification check failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

import numpy as np

from . import analysis, verify
from .arch import ConfigKeyError, MacroConfig, PRESETS, build_model, get_preset, graph_document, load_config
from .ops import ShapeError
from .smg import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {value}")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _model_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    src = p.add_mutually_exclusive_group(required=required)
    src.add_argument("--preset", type=str.lower, choices=sorted(k.lower() for k in PRESETS))
    src.add_argument("--config", metavar="PATH", help="YAML model config")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("text", "structured"), default="text")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", metavar="PATH", help="write the report here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hcgnet", description="HCGNet builder, analyser and verifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="shape table, parameter and MAC report")
    _model_args(p)
    p.add_argument("--input", type=_positive, help="input resolution (default: the config's)")
    p.add_argument("--tol-params", type=float, default=analysis.DEFAULT_TOL_PARAMS, metavar="PCT")
    p.add_argument("--tol-flops", type=float, default=analysis.DEFAULT_TOL_FLOPS, metavar="PCT")
    _common(p)

    p = sub.add_parser("verify", help="invariant suite on a seeded random instance")
    _model_args(p)
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _model_args(p, required=False)
    p.add_argument("--op", choices=sorted(verify.OP_PROBLEMS) + ["smg"], help="check a single op kind")
    p.add_argument("--tolerance", type=float, default=1e-4)
    _common(p)

    p = sub.add_parser("overfit", help="toy overfitting run")
    _model_args(p, required=False)
    p.add_argument("--steps", type=_positive, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    _common(p)

    p = sub.add_parser("export", help="write the graph document")
    _model_args(p)
    _common(p)
    return parser


def _resolve(args) -> Optional[MacroConfig]:
    if getattr(args, "preset", None):
        return get_preset(args.preset)
    if getattr(args, "config", None):
        return load_config(args.config)
    return None


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _summarize(args, config: MacroConfig):
    model = build_model(config, args.seed)
    report = analysis.cost_report(model, args.input)
    checks = None
    if args.preset:
        checks = analysis.check_targets(report, args.preset, args.tol_params, args.tol_flops)
    if args.format == "structured":
        text = _dump(analysis.structured_report(report, checks))
    else:
        text = analysis.text_report(report, checks)
    ok = checks is None or all(c.ok for c in checks)
    return text, ok


def _verify(args, config: MacroConfig):
    report = verify.run_invariant_suite(config, args.seed)
    if args.format == "structured":
        doc = {
            "model": report.model,
            "seed": report.seed,
            "passed": report.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "residual": c.residual, "detail": c.detail}
                for c in report.checks
            ],
        }
        return _dump(doc), report.passed
    lines = [f"invariant suite: {report.model}, seed {report.seed}"]
    for c in report.checks:
        detail = f"  ({c.detail})" if c.detail else ""
        lines.append(f"{'PASS' if c.passed else 'FAIL'} {c.name}: residual {c.residual:.3g}{detail}")
    return "\n".join(lines) + "\n", report.passed


def _gradcheck(args, config: Optional[MacroConfig]):
    if args.op and config is not None:
        raise UsageError("gradcheck: --op cannot be combined with --preset/--config")
    if args.op:
        targets = [args.op]
    elif config is not None:
        model = build_model(config, args.seed)
        targets = []
        for kind in sorted(verify.graph_op_kinds(model)):
            targets += [t for t in verify.NODE_KIND_PROBLEMS[kind] if t not in targets]
    else:
        targets = list(verify.OP_PROBLEMS) + ["smg"]
    reports = [verify.gradcheck(t, args.seed, args.tolerance) for t in targets]
    ok = all(r.passed for r in reports)
    if args.format == "structured":
        doc = [
            {"target": t, "name": r.target, "passed": r.passed, "max_rel_error": r.worst, "failures": len(r.failures)}
            for t, r in zip(targets, reports)
        ]
        return _dump({"tolerance": args.tolerance, "passed": ok, "checks": doc}), ok
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.target}: max rel. err {r.worst:.2e}" for r in reports]
    return "\n".join(lines) + "\n", ok


def _overfit(args, config: Optional[MacroConfig]):
    config = config or verify.TOY_CONFIG
    try:
        trace = verify.overfit_toy(config, steps=args.steps, lr=args.lr, seed=args.seed)
    except verify.DivergenceError as err:
        return f"diverged: {err}\n", False
    smooth = verify.smoothed(trace.losses)
    monotone = bool(np.all(np.diff(smooth) <= 0))
    ok = trace.final_accuracy >= 0.95 and monotone
    if args.format == "structured":
        doc = {
            "model": config.name,
            "steps": len(trace.losses),
            "final_loss": trace.losses[-1],
            "final_accuracy": trace.final_accuracy,
            "final_inference_accuracy": trace.final_inference_accuracy,
            "smoothed_monotone": monotone,
            "losses": trace.losses,
        }
        return _dump(doc), ok
    lines = [f"step {i:>4}  loss {l:.6f}  acc {a:.3f}" for i, (l, a) in enumerate(zip(trace.losses, trace.accuracies))]
    lines = lines[:: max(1, len(lines) // 20)] + [lines[-1]] if len(lines) > 20 else lines
    lines.append(
        f"final training accuracy {trace.final_accuracy:.3f} "
        f"(inference-mode BN {trace.final_inference_accuracy:.3f}); smoothed loss monotone: {monotone}"
    )
    return "\n".join(lines) + "\n", ok


def _export(args, config: MacroConfig):
    return _dump(graph_document(build_model(config, args.seed))), True


_HANDLERS = {
    "summarize": _summarize,
    "verify": _verify,
    "gradcheck": _gradcheck,
    "overfit": _overfit,
    "export": _export,
}


def run(argv: Optional[Sequence[str]] = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _resolve(args)
        text, ok = _HANDLERS[args.command](args, config)
    except UsageError as err:
        print(parser.format_usage().rstrip(), file=stderr)
        print(f"error: {err}", file=stderr)
        return EXIT_USAGE
    except ConfigKeyError as err:
        print(f"config error at {err.key_path}: {err.message}", file=stderr)
        return EXIT_CONFIG
    except (ConfigError, ShapeError) as err:
        print(f"config error: {err}", file=stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"config error: cannot read {err.filename}: {err.strerror}", file=stderr)
        return EXIT_CONFIG
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        stdout.write(text)
    return EXIT_OK if ok else EXIT_CHECK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
