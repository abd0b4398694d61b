import numpy as np
import pytest

from hcgnet import ops
from hcgnet.arch import (
    ConfigKeyError,
    MacroConfig,
    build_model,
    forward,
    get_preset,
    graph_document,
    hybrid_block_forward,
    load_config,
    parse_config,
)
from hcgnet.smg import ConfigError, SMGConfig, SMGParams, smg_forward
from hcgnet.tensor import Tensor

TINY = MacroConfig("tiny", "cifar", ((2, 4), (2, 8)), 5, 8)


def _blocks(model):
    return sorted({n.stage for n in model.nodes if n.stage.startswith("block")})


def test_preset_b_structure():
    model = build_model("b")
    assert _blocks(model) == ["block1", "block2", "block3", "block4"]
    for i, (n, k) in enumerate(((3, 32), (6, 48), (12, 64), (8, 96)), 1):
        mods = [x for x in model.nodes if x.stage == f"block{i}" and x.kind == "smg"]
        assert len(mods) == n
        assert all(SMGConfig(**m.config).out_channels == k for m in mods)
    trans = [x for x in model.nodes if x.stage.startswith("transition")]
    assert [t.name for t in trans] == ["transition1", "transition2", "transition3"]
    assert model.node("head.fc").config["out_features"] == 1000


def test_preset_a1_structure():
    model = build_model("A1")
    assert model.node("stem.conv").config["out_channels"] == 24
    assert model.node("stem.conv").config["stride"] == 1
    assert len([n for n in model.nodes if n.kind == "smg" and n.stage.startswith("block")]) == 24


def test_unknown_preset():
    with pytest.raises(ConfigError):
        get_preset("d")


def test_transition_channel_rule():
    model = build_model("b")
    c0 = 64
    for i, (n, k) in enumerate(((3, 32), (6, 48), (12, 64)), 1):
        out = SMGConfig(**model.node(f"transition{i}").config).out_channels
        assert out == int(0.5 * (c0 + n * k))
        c0 = out


def test_hybrid_block_channels():
    rng = np.random.default_rng(0)
    mods = []
    for i in range(3):
        cfg = SMGConfig(64 + 32 * i, 32)
        mods.append((cfg, SMGParams.init(cfg, rng)))
    x = Tensor(rng.standard_normal((1, 64, 8, 8)).astype(np.float32))
    assert hybrid_block_forward(x, mods).shape == (1, 160, 8, 8)


def test_single_module_block_is_concat():
    rng = np.random.default_rng(1)
    cfg = SMGConfig(16, 8)
    p = SMGParams.init(cfg, rng, np.float64)
    x = Tensor(rng.standard_normal((2, 16, 6, 6)))
    out = hybrid_block_forward(x, [(cfg, p)])
    np.testing.assert_array_equal(out.data, ops.concat_channels([x, smg_forward(x, cfg, p)]).data)


def test_hybrid_block_channel_mismatch():
    cfg = SMGConfig(16, 8)
    with pytest.raises(ConfigError):
        hybrid_block_forward(Tensor(np.zeros((1, 12, 4, 4))), [(cfg, SMGParams.init(cfg, np.random.default_rng(0)))])


def test_preset_b_logits_shape():
    model = build_model("b")
    x = Tensor(np.random.default_rng(2).standard_normal((1, 3, 224, 224)).astype(np.float32))
    assert forward(model, x).shape == (1, 1000, 1, 1)


def test_identical_rows_and_batch_permutation():
    model = build_model(TINY, seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 3, 8, 8))
    x[3] = x[1]
    out = forward(model, Tensor(x)).data
    np.testing.assert_array_equal(out[1], out[3])
    perm = np.array([2, 0, 3, 1])
    outp = forward(model, Tensor(x[perm])).data
    np.testing.assert_allclose(outp, out[perm], rtol=0, atol=1e-12)


def test_inference_forward_is_pure():
    model = build_model(TINY, seed=5)
    x = Tensor(np.random.default_rng(6).standard_normal((2, 3, 8, 8)).astype(np.float32))
    before = {k: v.copy() for k, bn in model.bn_states.items() for v in [bn.running_mean]}
    a = forward(model, x).data
    b = forward(model, x).data
    np.testing.assert_array_equal(a, b)
    for k, bn in model.bn_states.items():
        np.testing.assert_array_equal(bn.running_mean, before[k])


def test_softmax_output_option():
    model = build_model(TINY, seed=7, dtype=np.float64)
    x = Tensor(np.random.default_rng(8).standard_normal((2, 3, 8, 8)))
    p = forward(model, x, softmax=True).data
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)


def test_forward_rejects_wrong_input():
    model = build_model(TINY)
    with pytest.raises(ops.ShapeError):
        forward(model, Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))


def test_builds_are_deterministic():
    a, b = build_model("a1", seed=9), build_model("a1", seed=9)
    assert [(n.id, n.name, n.kind, n.inputs) for n in a.nodes] == [(n.id, n.name, n.kind, n.inputs) for n in b.nodes]
    assert a.edges == b.edges
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert graph_document(a) == graph_document(b)


def test_parameter_naming_convention():
    model = build_model(TINY)
    names = set(model.params)
    for key in ("ws33", "ws55", "W", "b", "bn.gamma", "W33", "b33", "W55", "b55"):
        assert f"block1.module1.update.{key}" in names
    for key in ("wsf", "W1", "b1", "bn.beta", "W2", "b2"):
        assert f"transition1.forget.{key}" in names
    assert {"head.fc.weight", "head.fc.bias"} <= names


# ---------------------------------------------------------------------------
# config documents


GOOD = {
    "name": "toy",
    "stem": "cifar",
    "classes": 10,
    "input": 16,
    "blocks": [{"modules": 2, "growth": 8}, {"modules": 3, "growth": 12}],
    "hybrid": {"g": 4, "alpha": 4, "ru": 2, "rf": 2},
    "transition": {"theta": 0.5},
}


def test_parse_config_roundtrip():
    cfg = parse_config(GOOD)
    assert cfg.blocks == ((2, 8), (3, 12))
    assert cfg.transition.theta == 0.5 and cfg.transition.g == 1
    build_model(cfg)


@pytest.mark.parametrize(
    "mutate,path",
    [
        (lambda d: d.update(colour=1), "colour"),
        (lambda d: d["blocks"][1].update(growht=3), "blocks[1].growht"),
        (lambda d: d["hybrid"].update(beta=1), "hybrid.beta"),
        (lambda d: d.pop("classes"), "classes"),
        (lambda d: d.update(input="big"), "input"),
        (lambda d: d["blocks"][0].update(modules=2.5), "blocks[0].modules"),
    ],
)
def test_parse_config_key_paths(mutate, path):
    import copy

    doc = copy.deepcopy(GOOD)
    mutate(doc)
    with pytest.raises(ConfigKeyError) as err:
        parse_config(doc)
    assert err.value.key_path == path


def test_invalid_divisibility_is_rejected_with_node_path():
    doc = dict(GOOD, blocks=[{"modules": 2, "growth": 6}, {"modules": 2, "growth": 8}])
    with pytest.raises(ConfigError, match="block1.module1"):
        build_model(parse_config(doc))


def test_load_config_yaml(tmp_path):
    path = tmp_path / "m.cfg"
    path.write_text("stem: imagenet\nclasses: 7\ninput: 64\nblocks:\n  - {modules: 2, growth: 8}\n  - {modules: 2, growth: 8}\n")
    cfg = load_config(path)
    assert cfg.stem == "imagenet" and cfg.num_classes == 7
    path.write_text("stem: [unclosed\n")
    with pytest.raises(ConfigKeyError):
        load_config(path)
