import numpy as np
import pytest

from rednet import ops
from rednet.tensor import Tape, Tensor

from reference_impls import conv2d_loops, max_rel_error, numeric_grad, transposed_conv2d_loops

GRAD_TOL = 1e-5


def _weighted_loss(build, consts, weight):
    """Analytic grads plus a closure recomputing the scalar for finite differences."""
    with Tape() as tape:
        out = build()
        loss = ops.sum_all(ops.mul_const(out, weight))
    tape.backward(loss)

    def value():
        return float((build().data * weight).sum())

    return value


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_sum_of_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    b = Tensor(np.zeros(1))
    out = ops.conv2d(x, k, b, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv2d_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 1, 5, 7)))
    k = Tensor(np.ones((1, 1, 1, 1)))
    out = ops.conv2d(x, k, Tensor(np.zeros(1)), padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), padding=1).data
    np.testing.assert_allclose(got, conv2d_loops(x, k, b, 1), rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch_names_both_shapes():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    k = Tensor(np.zeros((2, 5, 3, 3)))
    with pytest.raises(ValueError) as err:
        ops.conv2d(x, k, Tensor(np.zeros(2)), padding=0)
    assert "(1, 3, 4, 4)" in str(err.value) and "(2, 5, 3, 3)" in str(err.value)


def test_conv2d_kernel_too_large():
    x = Tensor(np.zeros((1, 1, 3, 3)))
    k = Tensor(np.zeros((1, 1, 5, 5)))
    with pytest.raises(ValueError, match="larger"):
        ops.conv2d(x, k, Tensor(np.zeros(1)), padding=0)


def test_conv2d_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    w = rng.standard_normal((2, 4, 8, 8))
    value = _weighted_loss(lambda: ops.conv2d(x, k, b, padding=1), (), w)
    for t in (x, k, b):
        assert max_rel_error(t.grad, numeric_grad(value, t.data)) < GRAD_TOL


# ---------------------------------------------------------------------------
# transposed_conv2d
# ---------------------------------------------------------------------------

def test_transposed_conv2d_shape_formula(rng):
    x = Tensor(rng.standard_normal((1, 2, 8, 8)))
    k = Tensor(rng.standard_normal((2, 3, 4, 4)))
    out = ops.transposed_conv2d(x, k, stride=2, padding=1)
    assert out.shape == (1, 3, 16, 16)


def test_transposed_conv2d_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    k = rng.standard_normal((3, 2, 4, 4))
    for stride, pad in ((1, 0), (2, 1), (3, 2)):
        got = ops.transposed_conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
        want = transposed_conv2d_loops(x, k, stride, pad)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_transposed_conv2d_is_adjoint_of_conv2d(rng):
    # <conv(x; k), y> == <x, tconv(y; k)>: the same kernel array serves both ops.
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    for pad in (0, 1):
        cout = ops.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(4)), padding=pad).data
        y = rng.standard_normal(cout.shape)
        tout = ops.transposed_conv2d(Tensor(y), Tensor(k), stride=1, padding=pad).data
        assert tout.shape == x.shape  # conv then matched tconv restores the extent
        assert abs((cout * y).sum() - (x * tout).sum()) < 1e-9


def test_transposed_conv2d_bilinear_kernel_preserves_constants():
    from rednet.training import init_bilinear

    k = np.zeros((1, 1, 4, 4))
    k[0, 0] = init_bilinear(4, 4, 2)
    x = Tensor(np.full((1, 1, 8, 8), 0.7))
    out = ops.transposed_conv2d(x, Tensor(k), stride=2, padding=1).data
    np.testing.assert_allclose(out[0, 0, 2:-2, 2:-2], 0.7, atol=1e-12)


def test_transposed_conv2d_rejects_bad_geometry():
    x = Tensor(np.zeros((1, 1, 1, 1)))
    with pytest.raises(ValueError, match="positive"):
        ops.transposed_conv2d(x, Tensor(np.zeros((1, 1, 2, 2))), stride=1, padding=1)
    with pytest.raises(ValueError, match="stride"):
        ops.transposed_conv2d(x, Tensor(np.zeros((1, 1, 2, 2))), stride=0, padding=0)


def test_transposed_conv2d_gradients(rng):
    x = Tensor(rng.standard_normal((1, 3, 5, 5)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
    w = rng.standard_normal((1, 2, 10, 10))
    value = _weighted_loss(lambda: ops.transposed_conv2d(x, k, stride=2, padding=1), (), w)
    for t in (x, k):
        assert max_rel_error(t.grad, numeric_grad(value, t.data)) < GRAD_TOL


# ---------------------------------------------------------------------------
# maxpool2d
# ---------------------------------------------------------------------------

def test_maxpool_tiny():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = ops.maxpool2d(x, 2, 2)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 4.0


def test_maxpool_constant_ties_route_to_lowest_linear_index():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    with Tape() as tape:
        out = ops.maxpool2d(x, 2, 2)
        loss = ops.sum_all(out)
    tape.backward(loss)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0  # top-left of each window
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_truncates_trailing_rows():
    x = Tensor(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5))
    out = ops.maxpool2d(x, 2, 2)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data[0, 0], [[6, 8], [16, 18]])


def test_maxpool_window_too_large():
    with pytest.raises(ValueError, match="window"):
        ops.maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), window=3, stride=1)


def test_maxpool_gradients_with_separated_values(rng):
    # values spaced >> h so the perturbation cannot flip any argmax
    vals = rng.permutation(np.arange(1 * 2 * 6 * 6, dtype=np.float64)).reshape(1, 2, 6, 6) * 1e-2
    x = Tensor(vals, requires_grad=True)
    w = rng.standard_normal((1, 2, 3, 3))
    value = _weighted_loss(lambda: ops.maxpool2d(x, 2, 2), (), w)
    assert max_rel_error(x.grad, numeric_grad(value, x.data)) < GRAD_TOL


# ---------------------------------------------------------------------------
# batchnorm2d
# ---------------------------------------------------------------------------

def test_batchnorm_train_normalizes(rng):
    x = Tensor(rng.standard_normal((4, 3, 6, 6)) * 3.0 + 2.0)
    stats = ops.BatchNormStats(3)
    out = ops.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, "train").data
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-6
    assert np.abs(var - 1.0).max() < 1e-4
    assert stats.updates == 1


def test_batchnorm_affine_form(rng):
    x = Tensor(rng.standard_normal((4, 2, 8, 8)))
    stats = ops.BatchNormStats(2)
    out = ops.batchnorm2d(x, Tensor(np.full(2, 2.0)), Tensor(np.full(2, 3.0)), stats, "train").data
    assert np.abs(out.mean(axis=(0, 2, 3)) - 3.0).max() < 1e-6
    assert np.abs(out.std(axis=(0, 2, 3)) - 2.0).max() < 1e-3


def test_batchnorm_infer_before_train_rejected():
    stats = ops.BatchNormStats(2)
    with pytest.raises(ValueError, match="running stats"):
        ops.batchnorm2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "infer")


def test_batchnorm_running_stats_ema(rng):
    x = rng.standard_normal((8, 2, 4, 4)) * 2.0 + 5.0
    stats = ops.BatchNormStats(2)
    ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "train")
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(stats.mean, 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * var, rtol=1e-12)


def test_batchnorm_gradients_train_mode(rng):
    x = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
    g = Tensor(rng.standard_normal(2) + 1.5, requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    w = rng.standard_normal((3, 2, 4, 4))

    def build():
        return ops.batchnorm2d(x, g, b, ops.BatchNormStats(2), "train")

    value = _weighted_loss(build, (), w)
    for t in (x, g, b):
        assert max_rel_error(t.grad, numeric_grad(value, t.data)) < GRAD_TOL


def test_batchnorm_gradients_infer_mode(rng):
    stats = ops.BatchNormStats(2)
    ops.batchnorm2d(Tensor(rng.standard_normal((4, 2, 4, 4))), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "train")
    x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    g = Tensor(rng.standard_normal(2) + 1.0, requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    w = rng.standard_normal((2, 2, 4, 4))
    value = _weighted_loss(lambda: ops.batchnorm2d(x, g, b, stats, "infer"), (), w)
    for t in (x, g, b):
        assert max_rel_error(t.grad, numeric_grad(value, t.data)) < GRAD_TOL


# ---------------------------------------------------------------------------
# activations / concat
# ---------------------------------------------------------------------------

def test_leaky_relu_reference_values():
    out = ops.leaky_relu(Tensor(np.array([-1.0, 0.0, 2.0])), slope=0.1)
    np.testing.assert_allclose(out.data, [-0.1, 0.0, 2.0])


def test_leaky_relu_slope_one_is_identity(rng):
    x = rng.standard_normal(20)
    np.testing.assert_array_equal(ops.leaky_relu(Tensor(x), slope=1.0).data, x)


def test_leaky_relu_gradients_away_from_zero(rng):
    vals = rng.standard_normal((3, 7))
    vals[np.abs(vals) < 1e-2] += 0.5
    x = Tensor(vals, requires_grad=True)
    w = rng.standard_normal((3, 7))
    value = _weighted_loss(lambda: ops.leaky_relu(x), (), w)
    assert max_rel_error(x.grad, numeric_grad(value, x.data)) < GRAD_TOL


def test_sigmoid_values_and_range(rng):
    assert ops.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
    xs = np.array([-300.0, -30.0, -5.0, 5.0, 30.0, 300.0])
    out = ops.sigmoid(Tensor(xs)).data
    assert np.all(np.isfinite(out))
    assert np.all(np.diff(ops.sigmoid(Tensor(np.linspace(-10, 10, 50))).data) > 0)


def test_sigmoid_gradients(rng):
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    w = rng.standard_normal((4, 5))
    value = _weighted_loss(lambda: ops.sigmoid(x), (), w)
    assert max_rel_error(x.grad, numeric_grad(value, x.data)) < GRAD_TOL


def test_concat_channels_shapes_and_order(rng):
    a = Tensor(rng.standard_normal((2, 3, 4, 4)))
    b = Tensor(rng.standard_normal((2, 1, 4, 4)))
    out = ops.concat_channels(a, b)
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_array_equal(out.data[:, :3], a.data)
    np.testing.assert_array_equal(out.data[:, 3:], b.data)


def test_concat_with_zero_channel_tensor_is_identity(rng):
    a = Tensor(rng.standard_normal((1, 3, 2, 2)))
    z = Tensor(np.zeros((1, 0, 2, 2)))
    np.testing.assert_array_equal(ops.concat_channels(a, z).data, a.data)


def test_concat_spatial_mismatch_rejected():
    with pytest.raises(ValueError, match="mismatch"):
        ops.concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 4))))


def test_concat_gradient_split(rng):
    a = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
    w = rng.standard_normal((2, 5, 3, 3))
    value = _weighted_loss(lambda: ops.concat_channels(a, b), (), w)
    for t in (a, b):
        assert max_rel_error(t.grad, numeric_grad(value, t.data)) < GRAD_TOL
