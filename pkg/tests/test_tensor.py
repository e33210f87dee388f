import numpy as np
import pytest

from rednet import ops
from rednet.tensor import Tape, Tensor, backward


def test_tensor_defaults_to_float_and_tracks_shape():
    t = Tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float64
    assert t.shape == (2, 2)
    assert t.grad is None and not t.requires_grad


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_sum_of_squares_gives_x(rng):
    data = rng.standard_normal((3, 4))
    x = Tensor(data.copy(), requires_grad=True)
    with Tape() as tape:
        sq = ops.mul_const(x, data)  # x * x with x's values frozen as the constant
        loss = ops.scale(ops.sum_all(sq), 0.5)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 0.5 * data)


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_without_tape_raises():
    loss = Tensor(1.0, requires_grad=True)
    with pytest.raises(ValueError, match="tape"):
        backward(loss)


def test_shared_subexpression_accumulates_additively(rng):
    # grad of x in f(x) + f(x) must be exactly twice the grad in f(x)
    data = rng.standard_normal((4, 4))

    def grad_of(n_terms):
        x = Tensor(data.copy(), requires_grad=True)
        with Tape() as tape:
            y = ops.sigmoid(x)
            s = ops.sum_all(y)
            total = s
            for _ in range(n_terms - 1):
                total = ops.add(total, s)
        tape.backward(total)
        return x.grad

    np.testing.assert_allclose(grad_of(2), 2.0 * grad_of(1), rtol=0, atol=0)


def test_repeated_backward_accumulates():
    x = Tensor(np.ones(5), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    tape.backward(loss)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0 * np.ones(5))
    x.zero_grad()
    assert x.grad is None


def test_no_recording_without_active_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ops.scale(x, 3.0)
    assert y.tape is None


def test_forward_outputs_finite_on_finite_inputs(rng):
    x = Tensor(rng.standard_normal((2, 3, 8, 8)) * 50.0, requires_grad=True)
    k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    with Tape() as tape:
        y = ops.conv2d(x, k, b, padding=1)
        y = ops.leaky_relu(y)
        y = ops.sigmoid(y)
        loss = ops.sum_all(y)
    tape.backward(loss)
    assert np.all(np.isfinite(y.data))
    for t in (x, k, b):
        assert np.all(np.isfinite(t.grad))
