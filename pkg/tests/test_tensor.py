import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import permute_by_index
from sshunet.errors import ArgumentError, NonFiniteError
from sshunet.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    inverse_permutation,
    mul,
    narrow,
    pad,
    permute,
    reshape,
    tsum,
)


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_permute_transpose():
    t = Tensor(np.arange(6).reshape(2, 3))
    out = permute(t, (1, 0))
    assert out.shape == (3, 2)
    for i in range(2):
        for j in range(3):
            assert out.data[j, i] == t.data[i, j]


def test_permute_identity():
    t = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
    assert np.array_equal(permute(t, (0, 1, 2)).data, t.data)


def test_permute_index_oracle():
    t = Tensor(np.arange(8).reshape(1, 2, 2, 2))
    out = permute(t, (0, 3, 1, 2))
    ref = permute_by_index(t.data, (0, 3, 1, 2))
    assert np.array_equal(out.data, ref)
    for x in range(2):
        for y in range(2):
            for z in range(2):
                assert out.data[0, z, x, y] == t.data[0, x, y, z]
    assert out.data[0, 1, 0, 1] == 3


def test_permute_rejects_non_permutation():
    t = Tensor(np.zeros((2, 3)))
    with pytest.raises(ArgumentError):
        permute(t, (0, 0))
    with pytest.raises(ArgumentError):
        permute(t, (0, 1, 2))


@given(st.permutations(range(4)), st.integers(0, 2**32 - 1))
def test_permute_inverse_round_trip(order, seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, 1, 4)).astype(np.float32)
    t = Tensor(x)
    back = permute(permute(t, order), inverse_permutation(order))
    assert np.array_equal(back.data, x)
    assert np.array_equal(permute(t, order).data, permute_by_index(x, order))


def test_permute_gradient_is_inverse_permutation():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4)), requires_grad=True)
    w = np.random.default_rng(2).standard_normal((4, 2, 3)).astype(np.float32)
    with Tape() as tape:
        loss = tsum(mul(permute(x, (2, 0, 1)), Tensor(w)))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, w.transpose(1, 2, 0))


def test_backward_sum_gives_ones():
    t = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(t)
    backward(tape, loss)
    assert np.array_equal(t.grad, np.ones((3, 4), dtype=np.float32))


def test_backward_square():
    t = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(t, t))
    tape.backward(loss)
    assert np.array_equal(t.grad, [2.0, 4.0])


def test_backward_accumulates_without_reset():
    t = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(t, t))
    tape.backward(loss)
    tape.backward(loss)
    assert np.array_equal(t.grad, [4.0, 8.0])


def test_backward_non_scalar_rejected():
    t = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = mul(t, 2.0)
    with pytest.raises(ArgumentError):
        tape.backward(y)


def test_unreached_leaf_gets_zero_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(a)
        mul(b, 2.0)
    tape.backward(loss)
    assert np.array_equal(b.grad, [0.0, 0.0])


def test_tape_records_in_execution_order_and_replays_in_reverse():
    visited = []
    t = Tensor([1.0], requires_grad=True)
    from sshunet.tensor import apply_op

    def op(x, tag):
        def vjp(g):
            visited.append(tag)
            return (g,)

        return apply_op(x.data.copy(), (x,), vjp)

    with Tape() as tape:
        y = op(op(op(t, "a"), "b"), "c")
        loss = tsum(y)
    assert len(tape) == 4
    tape.backward(loss)
    assert visited == ["c", "b", "a"]


def test_no_recording_without_tape():
    t = Tensor([1.0], requires_grad=True)
    y = mul(t, 3.0)
    assert not y.requires_grad


def test_diamond_graph_accumulates():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(add(mul(x, x), mul(x, 2.0)))
    tape.backward(loss)
    assert x.grad[0] == pytest.approx(2 * 3.0 + 2.0)


def test_pad_narrow_concat_reshape_gradients():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    y = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    w = rng.standard_normal((4, 7)).astype(np.float32)
    with Tape() as tape:
        z = pad(concat([x, y], axis=1), ((1, 1), (1, 1)))
        loss = tsum(mul(z, Tensor(w)))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, w[1:3, 1:4])
    np.testing.assert_allclose(y.grad, w[1:3, 4:6])

    with Tape() as tape:
        loss = tsum(mul(reshape(narrow(x, 1, 1, 3), (4,)), Tensor([1.0, 2.0, 3.0, 4.0])))
    x.grad = None
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [[0, 1, 2], [0, 3, 4]])


def test_grad_shape_matches_data():
    x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(permute(x, (2, 1, 0)))
    tape.backward(loss)
    assert x.grad.shape == x.shape
