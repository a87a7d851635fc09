import numpy as np
import pytest

from equnet import ops
from equnet.tensor import NonFiniteError, Tape, Tensor, backward, is_grad_enabled, no_grad


def test_tensor_defaults_to_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert t.shape == (3,)
    assert t.grad is None


def test_float64_is_preserved():
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_product_rule_by_hand():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True, dtype=np.float64)
    y = Tensor(np.array([5.0, 7.0]), requires_grad=True, dtype=np.float64)
    loss = ops.sum(x * y + x)
    backward(loss)
    np.testing.assert_array_equal(x.grad, [6.0, 8.0])
    np.testing.assert_array_equal(y.grad, [2.0, -3.0])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5]), requires_grad=True, dtype=np.float64)
    h = x * x
    loss = ops.sum(h + h * 3.0)
    backward(loss)
    # d/dx 4x^2 = 8x
    np.testing.assert_allclose(x.grad, [12.0])


def test_leaf_grads_accumulate_across_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(ops.sum(x * 2.0))
    backward(ops.sum(x * 2.0))
    np.testing.assert_array_equal(x.grad, [4, 4, 4])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_backward_rejects_constant_loss():
    with pytest.raises(ValueError):
        backward(ops.sum(Tensor(np.ones(3))))


def test_tape_records_in_execution_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x * 3.0)
        loss = ops.sum(y)
    assert [n.op for n in tape.nodes] == ["mul", "relu", "sum"]
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [3, 3])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad and y._node is None


def test_non_finite_from_finite_inputs_raises():
    with pytest.raises(NonFiniteError):
        ops.div(Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_broadcast_gradient_is_reduced():
    x = Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
    b = Tensor(np.ones((1, 3)), requires_grad=True, dtype=np.float64)
    backward(ops.sum(x + b))
    assert b.grad.shape == (1, 3)
    np.testing.assert_array_equal(b.grad, [[2, 2, 2]])


def test_relu_gradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    backward(ops.sum(ops.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_deep_chain_does_not_recurse():
    x = Tensor(np.ones(1), requires_grad=True, dtype=np.float64)
    h = x
    for _ in range(5000):
        h = h * 1.0
    backward(ops.sum(h))
    assert x.grad[0] == 1.0
