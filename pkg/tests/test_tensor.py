"""Tensor ops, tape backward, and finite-difference gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalmamba import tensor as T
from modalmamba.tensor import GradientTape, Tensor, backward, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def test_linear_identity():
    x = Tensor(rng().standard_normal((2, 3, 4)))
    w = Tensor(np.eye(4))
    y = T.linear(x, w)
    np.testing.assert_array_equal(y.data, x.data)


def test_linear_zero_input_bias():
    x = Tensor(np.zeros((2, 3, 4)))
    w = Tensor(rng().standard_normal((4, 5)))
    bias = Tensor(np.full(5, 0.75))
    y = T.linear(x, w, bias)
    np.testing.assert_array_equal(y.data, np.full((2, 3, 5), 0.75))


def test_linear_hand_dot_product():
    # oracle: 2*1 + 3*1 + 0.5 = 5.5
    x = Tensor(np.array([[[2.0, 3.0]]]))
    w = Tensor(np.array([[1.0], [1.0]]))
    bias = Tensor(np.array([0.5]))
    y = T.linear(x, w, bias)
    assert y.shape == (1, 1, 1)
    assert y.item() == pytest.approx(5.5, abs=0)


def test_linear_shape_mismatch_names_axes():
    x = Tensor(np.zeros((1, 2, 3)))
    w = Tensor(np.zeros((4, 5)))
    with pytest.raises(T.ShapeError, match="inner axes"):
        T.linear(x, w)
    with pytest.raises(T.ShapeError, match="bias"):
        T.linear(Tensor(np.zeros((1, 2, 4))), w, Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------


def test_conv_identity_kernel():
    x = Tensor(rng(1).standard_normal((2, 5, 3)))
    kernel = np.zeros((3, 4))
    kernel[:, -1] = 1.0
    y = T.conv1d_causal_depthwise(x, Tensor(kernel))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_hand_example():
    # x=[1,2,3], kernel=[1,1]: y = [0+1, 1+2, 2+3] = [1,3,5]
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
    k = Tensor(np.array([[1.0, 1.0]]))
    y = T.conv1d_causal_depthwise(x, k)
    np.testing.assert_allclose(y.data.reshape(-1), [1.0, 3.0, 5.0])


def test_conv_zero_input():
    y = T.conv1d_causal_depthwise(Tensor(np.zeros((1, 4, 2))), Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(y.data, 0.0)


def test_conv_kernel_wider_than_sequence_is_fine():
    x = Tensor(rng(2).standard_normal((1, 2, 1)))
    k = Tensor(rng(3).standard_normal((1, 6)))
    y = T.conv1d_causal_depthwise(x, k)
    # position 0 only sees x[0] through the last tap
    assert y.data[0, 0, 0] == pytest.approx(k.data[0, -1] * x.data[0, 0, 0])


def test_conv_invalid_kernel_width():
    with pytest.raises(T.ValidationError):
        T.conv1d_causal_depthwise(Tensor(np.zeros((1, 3, 1))), Tensor(np.zeros((1, 0))))


def test_conv_causality():
    x0 = rng(4).standard_normal((1, 6, 2))
    k = Tensor(rng(5).standard_normal((2, 3)))
    y0 = T.conv1d_causal_depthwise(Tensor(x0), k).data
    t = 3
    x1 = x0.copy()
    x1[:, t, :] += 1.0
    y1 = T.conv1d_causal_depthwise(Tensor(x1), k).data
    np.testing.assert_array_equal(y0[:, :t, :], y1[:, :t, :])
    assert not np.array_equal(y0[:, t:, :], y1[:, t:, :])


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def test_activation_values():
    assert T.silu(Tensor(np.array(0.0))).item() == 0.0
    assert T.softplus(Tensor(np.array(0.0))).item() == pytest.approx(np.log(2.0), abs=1e-15)
    # silu(1) = 1 * sigmoid(1)
    expected = 1.0 / (1.0 + np.exp(-1.0))
    assert T.silu(Tensor(np.array(1.0))).item() == pytest.approx(expected, abs=1e-12)


@given(st.floats(min_value=-80, max_value=80, allow_nan=False))
@settings(max_examples=60, deadline=None)
def test_softplus_positive_everywhere(x):
    v = T.softplus(Tensor(np.array(x))).item()
    assert v > 0.0


def test_softplus_asymptote():
    for x in (50.0, -50.0):
        v = T.softplus(Tensor(np.array(x))).item()
        assert abs(v - max(x, 0.0)) < 1e-12


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_leaf_off_path_gets_zeros():
    tape = GradientTape()
    x = tape.watch(Tensor(rng(6).standard_normal((2, 2))))
    w = tape.watch(Tensor(rng(7).standard_normal((2, 2))))
    loss = T.tsum(T.silu(w))
    backward(tape, loss)
    np.testing.assert_array_equal(tape.grad(x), np.zeros((2, 2)))


def test_backward_sum_gives_ones():
    tape = GradientTape()
    x = tape.watch(Tensor(rng(8).standard_normal((3, 4))))
    backward(tape, T.tsum(x))
    np.testing.assert_array_equal(tape.grad(x), np.ones((3, 4)))


def test_backward_matches_finite_differences():
    w0 = rng(9).standard_normal((3, 3))
    x0 = rng(10).standard_normal((3, 3))

    def f(x, w):
        return T.tsum(T.silu(T.linear(x, w)))

    assert grad_check(f, [x0, w0], eps=1e-5) < 1e-6


def test_backward_errors():
    tape = GradientTape()
    x = tape.watch(Tensor(np.ones((2, 2))))
    off_tape = T.tsum(Tensor(np.ones(3)))
    with pytest.raises(T.UsageError):
        backward(tape, off_tape)
    with pytest.raises(T.ShapeError):
        backward(tape, T.silu(x))  # non-scalar loss


def test_two_tapes_cannot_mix():
    t1, t2 = GradientTape(), GradientTape()
    a = t1.watch(Tensor(np.ones(2)))
    b = t2.watch(Tensor(np.ones(2)))
    with pytest.raises(T.UsageError):
        T.add(a, b)


def test_gradient_accumulates_over_reuse():
    tape = GradientTape()
    x = tape.watch(Tensor(np.array([1.5, -0.5])))
    loss = T.tsum(T.mul(x, x))  # sum of squares
    backward(tape, loss)
    np.testing.assert_allclose(tape.grad(x), 2.0 * x.data)


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------


def test_grad_check_sum_of_squares():
    x0 = rng(11).standard_normal((4, 2))
    err = grad_check(lambda x: T.tsum(T.mul(x, x)), [x0])
    assert err < 1e-8


def test_grad_check_constant_function_is_exact():
    x0 = rng(12).standard_normal(5)
    err = grad_check(lambda x: T.scale(T.tsum(x), 0.0), [x0])
    assert err == 0.0


def test_grad_check_rejects_nonscalar():
    with pytest.raises(T.UsageError):
        grad_check(lambda x: T.silu(x), [np.ones(3)])


# ---------------------------------------------------------------------------
# per-op gradient checks (spec invariant: <1e-6 linear-family, <1e-4 otherwise)
# ---------------------------------------------------------------------------

LINEAR_CASES = {
    "linear": lambda r: (lambda x, w, b: T.tsum(T.linear(x, w, b)),
                         [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5)),
                          r.standard_normal(5)]),
    "conv1d": lambda r: (lambda x, k: T.tsum(T.conv1d_causal_depthwise(x, k)),
                         [r.standard_normal((2, 5, 3)), r.standard_normal((3, 3))]),
    "slice": lambda r: (lambda x: T.tsum(T.slice_last(x, 1, 3)),
                        [r.standard_normal((2, 2, 4))]),
    "gather": lambda r: (lambda x: T.tsum(T.gather_rows(x, np.array([0, 2, 2]))),
                         [r.standard_normal((4, 3))]),
    "scatter": lambda r: (lambda x: T.tsum(T.scatter_rows(x, np.array([3, 1]), 5)),
                          [r.standard_normal((2, 3))]),
    "embedding": lambda r: (lambda e: T.tsum(T.silu(T.embedding(e, np.array([1, 0, 1])))),
                            [r.standard_normal((3, 4))]),
}

NONLINEAR_CASES = {
    "silu": lambda r: (lambda x: T.tsum(T.silu(x)), [r.standard_normal((3, 3))]),
    "softplus": lambda r: (lambda x: T.tsum(T.softplus(x)), [r.standard_normal((3, 3))]),
    "sigmoid": lambda r: (lambda x: T.tsum(T.sigmoid(x)), [r.standard_normal(6)]),
    "exp": lambda r: (lambda x: T.tsum(T.exp(x)), [0.5 * r.standard_normal(6)]),
    "mul": lambda r: (lambda a, b: T.tsum(T.mul(a, b)),
                      [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "bcast_mul_dn": lambda r: (lambda d, a: T.tsum(T.bcast_mul_dn(d, a)),
                               [r.standard_normal((2, 3, 4)), r.standard_normal((4, 2))]),
    "outer_bl": lambda r: (lambda u, b: T.tsum(T.outer_bl(u, b)),
                           [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 2))]),
    "mul_dn": lambda r: (lambda d, x: T.tsum(T.mul_dn(d, x)),
                         [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4, 2))]),
    "rmsnorm": lambda r: (lambda x, g: T.tsum(T.silu(T.rmsnorm(x, g))),
                          [r.standard_normal((3, 4)), r.standard_normal(4)]),
    "mean": lambda r: (lambda x: T.tmean(T.silu(x)), [r.standard_normal((2, 5))]),
    "mse": lambda r: (lambda x: T.mse_mean(x, np.zeros((2, 3)) + 0.3),
                      [r.standard_normal((2, 3))]),
}


@pytest.mark.parametrize("name", sorted(LINEAR_CASES))
def test_grad_linear_family(name):
    f, inputs = LINEAR_CASES[name](rng(hash(name) % 2**32))
    assert grad_check(f, inputs, eps=1e-5) < 1e-6


@pytest.mark.parametrize("name", sorted(NONLINEAR_CASES))
def test_grad_nonlinear(name):
    f, inputs = NONLINEAR_CASES[name](rng(hash(name) % 2**32))
    assert grad_check(f, inputs, eps=1e-5) < 1e-4


def test_grad_cross_entropy():
    r = rng(13)
    targets = np.array([0, 2, 1])
    err = grad_check(lambda l: T.cross_entropy_mean(l, targets),
                     [r.standard_normal((3, 4))])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# flop meter
# ---------------------------------------------------------------------------


def test_flop_meter_counts_linear():
    x = Tensor(np.zeros((2, 3, 4)))
    w = Tensor(np.zeros((4, 8)))
    with T.count_flops() as meter:
        T.linear(x, w, flop_bucket="proj")
    assert meter.by_bucket == {"proj": 2 * 3 * 4 * 8}
    assert meter.flops == 2 * meter.mul_adds


def test_flop_meter_off_by_default():
    x = Tensor(np.zeros((1, 2, 3)))
    w = Tensor(np.zeros((3, 3)))
    with T.count_flops() as meter:
        pass
    T.linear(x, w)
    assert meter.mul_adds == 0
