import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iekd import ops
from iekd.errors import NonScalarLoss, ShapeMismatch
from iekd.tensor import (
    Tape,
    Tensor,
    backward,
    no_grad,
    read_tensor,
    recording,
    tensor_from_bytes,
    tensor_to_bytes,
    zero_grad,
)


def test_storage_is_float64_and_scalars_become_length_one():
    t = Tensor(3)
    assert t.data.dtype == np.float64
    assert t.shape == (1,)
    assert Tensor([1, 2], requires_grad=True).data.dtype == np.float64


def test_zero_extent_rejected():
    with pytest.raises(ShapeMismatch):
        Tensor(np.zeros((2, 0)))


def test_gradient_of_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with recording():
        backward(ops.sum(ops.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_two_backward_calls_double_the_gradient():
    x = Tensor([1.0, -2.0], requires_grad=True)
    with recording():
        loss = ops.sum(ops.mul(x, x))
        backward(loss)
        first = x.grad.copy()
        backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_zero_grad_resets():
    x = Tensor([1.0], requires_grad=True)
    with recording():
        backward(ops.mul(x, x))
    zero_grad([x])
    np.testing.assert_array_equal(x.grad, [0.0])


def test_constant_loss_gives_no_gradient():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with recording():
        backward(Tensor([5.0]))
    assert w.grad is None


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with recording():
        y = ops.mul(x, x)
        with pytest.raises(NonScalarLoss):
            backward(y)


def test_node_ids_increase_and_tape_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tape = Tape()
    with recording(tape):
        a = ops.mul(x, x)
        b = ops.sum(a)
    assert a.node_id < b.node_id
    assert len(tape) == 2
    tape.reset()
    assert len(tape) == 0 and tape.next_id == 0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    tape = Tape()
    with recording(tape), no_grad():
        y = ops.mul(x, x)
    assert len(tape) == 0 and y.node_id is None


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    with recording():
        y = ops.mul(x, x)
        backward(ops.add(y, y))
    np.testing.assert_array_equal(x.grad, [12.0])


def test_only_single_element_broadcast_is_implicit():
    a = Tensor(np.ones((3, 4)))
    np.testing.assert_array_equal(ops.add(a, Tensor([2.0])).data, np.full((3, 4), 3.0))
    with pytest.raises(ShapeMismatch):
        ops.add(a, Tensor(np.ones(4)))
    np.testing.assert_array_equal(ops.broadcast_to(Tensor(np.ones((3, 1))), (3, 4)).data, np.ones((3, 4)))


def test_serialization_layout_is_pinned():
    blob = tensor_to_bytes(Tensor([[1.0, 2.0, 3.0]]))
    assert blob[:4] == struct.pack("<I", 2)
    assert blob[4:20] == struct.pack("<QQ", 1, 3)
    assert blob[20:] == struct.pack("<3d", 1.0, 2.0, 3.0)
    assert blob.hex() == (
        "02000000" "0100000000000000" "0300000000000000"
        "000000000000f03f" "0000000000000040" "0000000000000840"
    )


def test_truncated_record_raises():
    blob = tensor_to_bytes(np.arange(6.0).reshape(2, 3))
    with pytest.raises(EOFError):
        read_tensor(io.BytesIO(blob[:-1]))
    with pytest.raises(EOFError):
        read_tensor(io.BytesIO(blob[:6]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31))
def test_serialization_round_trip(shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape)
    back = tensor_from_bytes(tensor_to_bytes(arr))
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
