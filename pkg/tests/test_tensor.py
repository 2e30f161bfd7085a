import threading

import numpy as np
import pytest

from src.engine import (
    ComputeGraph,
    Tensor,
    backward,
    forward_op,
    no_grad,
    supported_ops,
)
from src.engine import functional as F
from src.engine.tensor import is_grad_enabled
from src.utils.errors import NonFiniteError, ShapeError


def test_broadcast_add_reduces_gradient_to_operand_shape():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.arange(4.0).reshape(1, 4), requires_grad=True)
    backward(F.sum_all(F.add(a, b)))
    np.testing.assert_array_equal(a.grad, np.full((3, 1), 4.0))
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_shared_input_accumulates_from_both_paths():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = F.sum_all(F.mul(x, x))
    backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_repeated_backward_accumulates_on_leaves():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    loss = F.sum_all(F.mul(x, Tensor(np.array([3.0, 4.0]))))
    graph = ComputeGraph.from_output(loss)
    backward(loss, graph)
    backward(loss, graph)
    np.testing.assert_array_equal(x.grad, [6.0, 8.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_intermediate_nodes_do_not_keep_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    hidden = F.relu(x)
    backward(F.sum_all(hidden))
    assert hidden.grad is None
    leaves = ComputeGraph.from_output(F.sum_all(F.relu(x))).leaves()
    assert len(leaves) == 1 and leaves[0] is x


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(F.relu(x))


def test_no_grad_records_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = F.mul(x, x)
    assert is_grad_enabled()
    assert not y.requires_grad
    assert y.is_leaf


def test_no_grad_is_thread_local():
    seen = []

    def worker():
        seen.append(is_grad_enabled())

    with no_grad():
        thread = threading.Thread(target=worker)
        thread.start()
        thread.join()
    assert seen == [True]


def test_non_finite_input_is_rejected():
    with pytest.raises(NonFiniteError):
        F.relu(Tensor(np.array([1.0, np.nan])))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 4, 4))
    for f in range(3):
        for i in range(4):
            for j in range(4):
                window = padded[0, :, i : i + 3, j : j + 3]
                expected[0, f, i, j] = np.sum(window * w[f]) + b[f]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv2d_stride_output_shape():
    x = Tensor(np.ones((2, 3, 8, 8)))
    out = F.conv2d(x, Tensor(np.ones((5, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 5, 4, 4)


def test_max_pool_routes_gradient_to_first_maximum():
    x = Tensor(np.array([[[[1.0, 5.0], [5.0, 2.0]]]]), requires_grad=True)
    out = F.max_pool2d(x, 2)
    assert out.data.item() == 5.0
    backward(F.sum_all(out))
    np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_softmax_rows_sum_to_one_for_large_logits():
    out = F.softmax(Tensor(np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]]))).data
    np.testing.assert_allclose(out.sum(axis=1), [1.0, 1.0])
    assert np.all(np.isfinite(out))


def test_sigmoid_is_stable_at_extremes():
    out = F.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_dropout_eval_is_identity_and_training_rescales():
    x = Tensor(np.ones((200, 50)))
    assert F.dropout(x, 0.3, training=False) is x
    out = F.dropout(x, 0.3, True, np.random.default_rng(0)).data
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1 / 0.7)


def test_dropout_expectation_over_many_masks():
    values = np.array([0.5, -1.0, 2.0, 3.0])
    masks = 40_000
    # 每一行是一次独立的掩码
    x = Tensor(np.tile(values, (masks, 1)))
    out = F.dropout(x, 0.3, True, np.random.default_rng(0)).data
    np.testing.assert_allclose(out.mean(axis=0), values, rtol=0.02)
    dropped = np.mean(out == 0, axis=0)
    np.testing.assert_allclose(dropped, 0.3, atol=0.02)


def test_dropout_rejects_rate_one():
    with pytest.raises(ValueError):
        F.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


def test_narrow_and_concat_are_inverse():
    x = Tensor(np.arange(12.0).reshape(2, 6))
    left = F.narrow(x, 0, 2, axis=1)
    right = F.narrow(x, 2, 4, axis=1)
    np.testing.assert_array_equal(F.concat([left, right], axis=1).data, x.data)
    with pytest.raises(ShapeError):
        F.narrow(x, 5, 2, axis=1)


def test_forward_op_dispatches_by_name():
    assert {"conv2d", "matmul", "softmax", "dropout", "concat"} <= set(supported_ops())
    out = forward_op("add", [Tensor(np.ones(2)), Tensor(np.ones(2))])
    np.testing.assert_array_equal(out.data, [2.0, 2.0])
    with pytest.raises(KeyError):
        forward_op("gelu", [Tensor(np.ones(2))])
