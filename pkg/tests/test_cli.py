import io
import json
import subprocess
import sys

import pytest

from hcgnet.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_USAGE, run


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def test_summarize_b_within_tolerance():
    code, out, _ = call("summarize", "--preset", "b", "--input", "224", "--format", "structured")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert all(c["ok"] for c in doc["checks"])
    assert {c["metric"] for c in doc["checks"]} == {"params_m", "gflops"}


def test_summarize_a1_flops_outside_tolerance_exits_3():
    code, out, _ = call("summarize", "--preset", "a1")
    assert code == EXIT_CHECK
    assert "FAIL gflops" in out and "PASS params_m" in out


def test_tolerance_override():
    code, _, _ = call("summarize", "--preset", "a1", "--tol-flops", "25")
    assert code == EXIT_OK


def test_broken_config_reports_key_path(tmp_path):
    cfg = tmp_path / "broken.cfg"
    cfg.write_text("stem: cifar\nclasses: 10\ninput: 32\nblocks:\n  - {modules: 2, growht: 8}\n")
    code, out, err = call("summarize", "--config", str(cfg))
    assert code == EXIT_CONFIG and out == ""
    assert "blocks[0].growht" in err


def test_config_without_targets(tmp_path):
    cfg = tmp_path / "ok.cfg"
    cfg.write_text("name: mine\nstem: cifar\nclasses: 10\ninput: 16\nblocks:\n  - {modules: 2, growth: 8}\n  - {modules: 2, growth: 8}\n")
    code, out, _ = call("summarize", "--config", str(cfg), "--format", "structured")
    assert code == EXIT_OK and "checks" not in json.loads(out)


def test_ladder_underflow_is_config_error():
    code, _, err = call("summarize", "--preset", "b", "--input", "7")
    assert code == EXIT_CONFIG and "transition2" in err


def test_missing_config_file():
    code, _, err = call("export", "--config", "/nonexistent/x.cfg")
    assert code == EXIT_CONFIG and "cannot read" in err


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["summarize"],
        ["summarize", "--preset", "b", "--config", "x"],
        ["summarize", "--preset", "z"],
        ["summarize", "--preset", "b", "--bogus"],
        ["summarize", "--preset", "b", "--input", "0"],
        ["verify", "--preset", "a1", "--seed", "-1"],
        ["gradcheck", "--op", "tanh", "--preset", "a1"],
        ["frobnicate"],
    ],
)
def test_usage_errors(argv):
    code, _, err = call(*argv)
    assert code == EXIT_USAGE and "error" in err


def test_verify_a1():
    code, out, _ = call("verify", "--preset", "a1", "--seed", "0")
    assert code == EXIT_OK
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_verify_reports_failure(monkeypatch):
    from hcgnet import gates, ops

    monkeypatch.setattr(gates, "_branch_softmax", lambda a, b: (ops.sigmoid(a), ops.sigmoid(b)))
    code, out, _ = call("verify", "--preset", "a1", "--format", "structured")
    assert code == EXIT_CHECK
    doc = json.loads(out)
    assert not doc["passed"] and [c["name"] for c in doc["checks"] if not c["passed"]] == ["branch-sum-to-one"]


def test_gradcheck_single_op():
    code, out, _ = call("gradcheck", "--op", "softmax_branch", "--format", "structured")
    assert code == EXIT_OK and json.loads(out)["passed"]


def test_overfit_short_run_fails_threshold():
    code, out, _ = call("overfit", "--steps", "3")
    assert code == EXIT_CHECK and "final training accuracy" in out


def test_export_and_out_file(tmp_path):
    path = tmp_path / "g.json"
    code, out, _ = call("export", "--preset", "a1", "--out", str(path))
    assert code == EXIT_OK and out == ""
    doc = json.loads(path.read_text())
    assert {"name", "config", "nodes", "edges"} <= set(doc)
    assert doc["nodes"][0]["kind"] == "input"


@pytest.mark.parametrize("argv", [["summarize", "--preset", "c", "--format", "structured"], ["export", "--preset", "b"]])
def test_outputs_are_byte_identical(argv):
    assert call(*argv)[1] == call(*argv)[1]


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "hcgnet", "summarize", "--preset", "b"], capture_output=True, text=True, timeout=120
    )
    assert proc.returncode == 0 and "PASS gflops" in proc.stdout
