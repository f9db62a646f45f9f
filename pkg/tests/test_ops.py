import numpy as np
import pytest

from iekd import ops
from iekd.errors import DegenerateBatch, LabelOutOfRange, ShapeMismatch
from iekd.gradcheck import check, run_suite
from iekd.tensor import Tensor, backward, recording


def naive_conv(x, k, pad=1):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, cout, h + 2 * pad - kh + 1, w + 2 * pad - kw + 1))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, i : i + kh, j : j + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, k)
    return out


def test_elementwise_definitions():
    np.testing.assert_array_equal(ops.abs(Tensor([-1.0, 2.0, 0.0])).data, [1.0, 2.0, 0.0])
    np.testing.assert_array_equal(ops.leaky_relu(Tensor([-10.0, 5.0]), 0.1).data, [-1.0, 5.0])
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_reductions():
    assert ops.l2_norm(Tensor([3.0, 4.0])).item() == 5.0
    assert ops.l1_norm(Tensor([-1.0, 2.0, -3.0])).item() == 6.0
    assert ops.mean(Tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5
    assert ops.sum(Tensor(np.ones((2, 3))), axes=1).shape == (2,)


def test_matmul_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ShapeMismatch):
        ops.matmul(a, Tensor(np.ones((3, 2))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a, b = Tensor(rng.standard_normal((3, 4)), True), Tensor(rng.standard_normal((4, 2)), True)
    w = Tensor(rng.standard_normal((3, 2)))
    assert check(lambda: ops.sum(ops.mul(ops.matmul(a, b), w)), [a, b]) < 1e-6


def test_conv_ones_oracle():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_matches_sliding_window():
    rng = np.random.default_rng(1)
    x, k = rng.standard_normal((2, 3, 5, 6)), rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(k)).data, naive_conv(x, k), atol=1e-12)


def test_conv_zero_kernel_and_zero_input():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    assert not ops.conv2d(x, Tensor(np.zeros((3, 2, 3, 3)))).data.any()
    assert not ops.conv2d_transpose(Tensor(np.zeros((1, 3, 4, 4))), Tensor(rng.standard_normal((3, 2, 3, 3)))).data.any()


def test_conv_transpose_is_adjoint():
    rng = np.random.default_rng(3)
    x, y, k = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    lhs = np.sum(ops.conv2d(Tensor(x), Tensor(k)).data * y)
    rhs = np.sum(x * ops.conv2d_transpose(Tensor(y), Tensor(k)).data)
    assert abs(lhs - rhs) < 1e-10


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))))


def test_avg_pool_values():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(ops.avg_pool2(x).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ShapeMismatch):
        ops.avg_pool2(Tensor(np.ones((1, 1, 3, 4))))


def _bn(x, train=True, update=True, rm=None, rv=None):
    c = x.shape[1]
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    return ops.batch_norm(x, Tensor(np.ones(c)), Tensor(np.zeros(c)), rm, rv, train, update)


def test_batch_norm_normalizes():
    # eps shrinks the variance to v / (v + eps); a spread of 10 keeps that below 1e-6
    x = Tensor(np.random.default_rng(4).standard_normal((8, 3, 4, 4)) * 10 + 2)
    out = _bn(x).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)
    v = x.data.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), v / (v + 1e-5), rtol=1e-12)


def test_batch_norm_constant_channel_gives_beta():
    x = Tensor(np.full((4, 2, 3, 3), 7.0))
    beta = Tensor([0.5, -1.0])
    out = ops.batch_norm(x, Tensor(np.ones(2)), beta, np.zeros(2), np.ones(2)).data
    np.testing.assert_allclose(out[:, 0], 0.5)
    np.testing.assert_allclose(out[:, 1], -1.0)


def test_batch_norm_running_stats():
    x = np.random.default_rng(5).standard_normal((6, 2))
    rm, rv = np.zeros(2), np.ones(2)
    _bn(Tensor(x), rm=rm, rv=rv)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    rm2, rv2 = np.zeros(2), np.ones(2)
    _bn(Tensor(x), update=False, rm=rm2, rv=rv2)
    assert not rm2.any() and (rv2 == 1).all()


def test_batch_norm_eval_uses_running_stats():
    x = Tensor(np.random.default_rng(6).standard_normal((5, 2)))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out = _bn(x, train=False, rm=rm, rv=rv).data
    np.testing.assert_allclose(out, (x.data - rm) / np.sqrt(rv + 1e-5))


def test_batch_norm_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        _bn(Tensor(np.ones((1, 3))))


def test_cross_entropy_values():
    assert abs(ops.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item() - np.log(4)) < 1e-12
    v = ops.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item()
    assert np.isfinite(v) and v < 1e-12
    with pytest.raises(LabelOutOfRange):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = Tensor(np.random.default_rng(7).standard_normal((4, 3)), requires_grad=True)
    y = np.array([0, 2, 1, 1])
    with recording():
        backward(ops.softmax_cross_entropy(logits, y, reduction="sum"))
    expected = ops.softmax(logits.data) - np.eye(3)[y]
    np.testing.assert_allclose(logits.grad, expected, atol=1e-14)


def test_take_and_concat_round_trip():
    x = Tensor(np.random.default_rng(8).standard_normal((2, 4, 2, 2)))
    a, b = ops.take(x, [0, 2], axis=1), ops.take(x, [1, 3], axis=1)
    back = ops.take(ops.concat([a, b], axis=1), [0, 2, 1, 3], axis=1)
    assert back.data.tobytes() == x.data.tobytes()


def test_full_gradcheck_suite_passes():
    results = run_suite()
    failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not failed
    assert {"conv2d", "conv2d_transpose", "batch_norm_train", "softmax_cross_entropy", "composed_student_objective"} <= {
        r.name for r in results
    }
