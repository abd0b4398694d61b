import numpy as np
import pytest

from hcgnet import ops
from hcgnet.tensor import GradTape, TapeError, Tensor, backward


def test_tensor_rank_and_dtype():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 0, 2, 2)))
    assert Tensor(np.zeros((1, 1, 1, 1), dtype=np.int64)).dtype == np.float32
    assert Tensor(np.zeros((1, 1, 1, 1))).dtype == np.float64


def test_sum_of_add_gives_ones():
    rng = np.random.default_rng(0)
    x, y = Tensor(rng.standard_normal((2, 3, 4, 4))), Tensor(rng.standard_normal((2, 3, 4, 4)))
    with GradTape() as tape:
        tape.watch(x, y)
        loss = ops.sum_all(ops.add(x, y))
    g = backward(tape, loss.grad_id)
    np.testing.assert_array_equal(g[x.grad_id].data, np.ones(x.shape))
    np.testing.assert_array_equal(g[y.grad_id].data, np.ones(y.shape))


def test_sum_of_concat_splits_back():
    x, y = Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones((1, 5, 2, 2)))
    with GradTape() as tape:
        tape.watch(x, y)
        loss = ops.sum_all(ops.concat_channels([x, y]))
    g = backward(tape, loss.grad_id)
    assert g[x.grad_id].shape == (1, 3, 2, 2) and g[y.grad_id].shape == (1, 5, 2, 2)
    assert np.all(g[x.grad_id].data == 1) and np.all(g[y.grad_id].data == 1)


def test_bn_of_conv_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    spec = ops.ConvSpec(2, 3, (3, 3), 1, 1)
    x = Tensor(rng.standard_normal((2, 2, 5, 5)))
    w = Tensor(rng.standard_normal(spec.weight_shape))
    bn = ops.BNState.create(3, np.float64)
    bn.gamma.data[...] = rng.standard_normal((1, 3, 1, 1))
    proj = rng.standard_normal((2, 3, 5, 5))

    def loss():
        # a projected sum; the plain sum of a train-mode BN output is constant in W
        return ops.sum_all(ops.batch_norm(ops.conv2d(x, w, spec=spec), bn, train=True), proj)

    with GradTape() as tape:
        tape.watch(w)
        out = loss()
    g = backward(tape, out.grad_id)[w.grad_id].data
    flat = w.data.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + 1e-6
        lp = loss().item()
        flat[k] = orig - 1e-6
        lm = loss().item()
        flat[k] = orig
        num = (lp - lm) / 2e-6
        assert abs(num - g.reshape(-1)[k]) / max(abs(num), abs(g.reshape(-1)[k]), 1e-8) < 1e-4


def test_backward_errors():
    x = Tensor(np.ones((1, 2, 2, 2)))
    with GradTape() as tape:
        tape.watch(x)
        y = ops.relu(x)
    with pytest.raises(TapeError):
        backward(tape, y.grad_id)  # non-scalar seed
    with pytest.raises(TapeError):
        backward(tape, 10_000)
    with pytest.raises(TapeError):
        backward(tape, None)


def test_tape_is_replayable():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 2, 3, 3)))
    with GradTape() as tape:
        tape.watch(x)
        loss = ops.sum_all(ops.tanh(x))
    n_nodes = len(tape.nodes)
    g1 = backward(tape, loss.grad_id)[x.grad_id].data
    g2 = backward(tape, loss.grad_id)[x.grad_id].data
    assert len(tape.nodes) == n_nodes
    np.testing.assert_array_equal(g1, g2)


def test_unreached_leaf_gets_zero_gradient():
    x, y = Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 2, 2, 2)))
    with GradTape() as tape:
        tape.watch(x, y)
        loss = ops.sum_all(x)
    g = backward(tape, loss.grad_id)
    assert np.all(g[y.grad_id].data == 0)


def test_no_recording_outside_tape():
    x = Tensor(np.ones((1, 1, 2, 2)))
    assert ops.relu(x).grad_id is None
