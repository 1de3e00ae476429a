import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import batchnorm_two_pass, conv2d_direct, l1_loop
from tarnet.errors import ContractError, DegenerateVarianceError, GradientError, ShapeError
from tarnet.gradcheck import grad_check, grad_check_detailed
from tarnet.tensor import (
    BNState,
    ParamStore,
    Tensor,
    add,
    avg_pool2x,
    batchnorm2d,
    conv2d,
    l1_sum,
    leaky_relu,
    precision,
    relu,
    tanh,
    upsample_nearest2x,
    where,
)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_direct_summation(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(t64(x), t64(w), t64(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, conv2d_direct(x, w, b, stride, pad), atol=1e-10)


def test_conv2d_1x1_kernel_and_no_bias():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2, 4, 4))
    w = rng.standard_normal((5, 2, 1, 1))
    out = conv2d(t64(x), t64(w), stride=2).data
    np.testing.assert_allclose(out, conv2d_direct(x, w, None, 2, 0), atol=1e-12)


def test_conv2d_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3, 5, 5\).*\(2, 4, 3, 3\)"):
        conv2d(t64(np.zeros((1, 3, 5, 5))), t64(np.zeros((2, 4, 3, 3))))


def test_batchnorm_train_matches_two_pass():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 1
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    state = BNState.fresh(3, np.float64)
    out = batchnorm2d(t64(x), t64(gamma), t64(beta), state, train=True).data
    ref, mean, var = batchnorm_two_pass(x, gamma, beta, 1e-5)
    np.testing.assert_allclose(out, ref, atol=1e-9)
    n = 4 * 5 * 5
    np.testing.assert_allclose(state.mean, 0.1 * mean, atol=1e-12)
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * var * n / (n - 1), atol=1e-12)


def test_batchnorm_inference_uses_running_stats():
    x = np.full((2, 1, 2, 2), 3.0)
    state = BNState(np.array([1.0]), np.array([4.0]))
    out = batchnorm2d(t64(x), t64([2.0]), t64([0.5]), state, train=False, eps=0.0).data
    np.testing.assert_allclose(out, 2.0 * (3 - 1) / 2 + 0.5)


def test_batchnorm_single_value_per_channel_is_rejected():
    with pytest.raises(DegenerateVarianceError):
        batchnorm2d(t64(np.ones((1, 2, 1, 1))), t64([1, 1]), t64([0, 0]), BNState.fresh(2), train=True)


def test_l1_sum_exactly_matches_sequential_loop():
    rng = np.random.default_rng(4)
    for shape in [(7,), (3, 5), (2, 3, 4, 4)]:
        x = rng.standard_normal(shape)
        assert float(l1_sum(t64(x)).data) == l1_loop(x)


def test_where_writes_positive_zero():
    x = t64([[-1.5, 2.0], [3.0, -0.0]])
    out = where(np.array([[False, True], [False, True]]), x).data
    assert out[0, 0] == 0 and not np.signbit(out[0, 0])
    assert out[0, 1] == 2.0


def test_leaky_relu_slope_zero_equals_relu():
    x = t64(np.linspace(-2, 2, 9))
    np.testing.assert_array_equal(leaky_relu(x, 0.0).data, relu(x).data)


def test_avg_pool_inverts_upsample_exactly():
    x = np.random.default_rng(5).standard_normal((2, 3, 4, 4)).astype(np.float32)
    up = upsample_nearest2x(Tensor(x))
    assert up.shape == (2, 3, 8, 8)
    np.testing.assert_array_equal(avg_pool2x(up).data, x)


def test_add_requires_identical_shapes():
    with pytest.raises(ShapeError):
        add(t64(np.zeros((2, 3))), t64(np.zeros((3,))))


def test_backward_twice_is_an_error():
    x = t64([1.0, 2.0], grad=True)
    loss = l1_sum(x)
    loss.backward()
    with pytest.raises(GradientError):
        loss.backward()


def test_backward_refuses_to_accumulate_into_stale_leaf_grad():
    x = t64([1.0, -2.0], grad=True)
    l1_sum(x).backward()
    with pytest.raises(GradientError):
        l1_sum(x * 2.0).backward()
    x.grad = None
    l1_sum(x * 2.0).backward()
    np.testing.assert_array_equal(x.grad, [2.0, -2.0])


def test_shared_subexpression_gradients_sum():
    x = t64([3.0], grad=True)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_precision_context_sets_default_dtype():
    with precision("double"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_paramstore_iterates_sorted_and_compares_bitwise():
    ps = ParamStore({"b": np.ones(2), "a": np.zeros(3)})
    assert ps.names() == ["a", "b"]
    other = ps.copy()
    assert ps.equal(other)
    other["a"].data = other["a"].data + np.float32(1e-7)
    assert not ps.equal(other)


def test_grad_check_rejects_single_precision():
    with pytest.raises(ContractError):
        grad_check(lambda x: l1_sum(x), Tensor([1.0], dtype=np.float32))


# -- gradient checks per primitive, double precision --------------------------


def _rand(rng, shape):
    return t64(rng.standard_normal(shape))


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_conv2d(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _rand(rng, (2, 2, 5, 5)), _rand(rng, (3, 2, 3, 3)), _rand(rng, (3,))
    for stride, pad in [(1, 1), (2, 1), (2, 0)]:
        side = (5 + 2 * pad - 3) // stride + 1
        p = t64(rng.standard_normal((2, 3, side, side)))
        f = lambda x, w, b: (conv2d(x, w, b, stride, pad) * p).sum()  # noqa: E731
        assert grad_check(f, [x, w, b]) < 1e-5


@pytest.mark.parametrize("train", [True, False])
def test_gradcheck_batchnorm(train):
    rng = np.random.default_rng(7)
    x, g, b = _rand(rng, (3, 2, 3, 3)), _rand(rng, (2,)), _rand(rng, (2,))
    w = t64(rng.standard_normal((3, 2, 3, 3)))
    state = BNState(np.array([0.3, -0.2]), np.array([1.5, 0.7]))

    def f(x, g, b):
        return (batchnorm2d(x, g, b, state.copy(), train=train) * w).sum()

    assert grad_check(f, [x, g, b]) < 1e-5


@pytest.mark.parametrize(
    "op",
    [
        lambda x: leaky_relu(x, 0.01),
        tanh,
        upsample_nearest2x,
        lambda x: x / 3.0,
    ],
)
def test_gradcheck_elementwise(op):
    rng = np.random.default_rng(11)
    x = _rand(rng, (2, 2, 3, 3))
    w = t64(rng.standard_normal(op(x).shape))
    res = grad_check_detailed(lambda x: (op(x) * w).sum(), x)
    assert res.max_rel_error < 1e-5
    assert res.checked > 0


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_gradcheck_leaky_relu_tiny_slope(sign):
    # probe each side separately: on mixed-sign input the 1e-7 side's gradient
    # sits below the finite-difference roundoff of the positive side's sum
    rng = np.random.default_rng(13)
    x = t64(sign * (np.abs(rng.standard_normal((2, 2, 3, 3))) + 0.1))
    w = t64(rng.standard_normal((2, 2, 3, 3)))
    assert grad_check(lambda x: (leaky_relu(x, 1e-7) * w).sum(), x) < 1e-5


def test_gradcheck_add_and_l1():
    rng = np.random.default_rng(12)
    a, b = _rand(rng, (3, 4)), _rand(rng, (3, 4))
    assert grad_check(lambda a, b: l1_sum(add(a, b)), [a, b]) < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.sampled_from([1, 2]), st.sampled_from([0, 1]))
def test_conv2d_oracle_property(cin, cout, size, stride, pad):
    rng = np.random.default_rng(cin * 100 + cout * 10 + size)
    x = rng.standard_normal((1, cin, size, size))
    w = rng.standard_normal((cout, cin, 3, 3))
    np.testing.assert_allclose(conv2d(t64(x), t64(w), stride=stride, pad=pad).data,
                               conv2d_direct(x, w, None, stride, pad), atol=1e-10)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tanh_stays_strictly_inside_unit_interval(dtype):
    out = tanh(Tensor(np.array([-1e4, -30.0, 0.0, 30.0, 1e4]), dtype=dtype)).data
    assert (np.abs(out) < 1).all()


def test_tape_is_bitwise_deterministic():
    rng = np.random.default_rng(9)
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    runs = []
    for _ in range(2):
        wt = Tensor(w, requires_grad=True)
        out = conv2d(Tensor(x), wt, pad=1)
        l1_sum(tanh(out)).backward()
        runs.append((out.data.tobytes(), wt.grad.tobytes()))
    assert runs[0] == runs[1]


def test_l1_sum_gradient_is_sign():
    x = t64([0.5, 2.0, 3.0], grad=True)
    l1_sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    y = t64([-0.5, -2.0], grad=True)
    (leaky_relu(y, 0.2)).sum().backward()
    np.testing.assert_allclose(y.grad, [0.2, 0.2])


def test_grad_check_sum_is_exact_and_l1_tight():
    dyadic = t64(np.arange(-3, 3) / 8.0)
    assert grad_check(lambda x: x.sum(), dyadic) == 0.0
    x = t64(np.random.default_rng(1).standard_normal(6))
    assert grad_check(lambda x: x.sum(), x) < 1e-12
    y = t64(np.abs(np.random.default_rng(2).standard_normal(6)) + 0.5)
    assert grad_check(l1_sum, y) < 1e-8
    z = t64(np.random.default_rng(3).standard_normal((1, 1, 4, 4)))
    w = t64(np.random.default_rng(4).standard_normal((2, 1, 3, 3)))
    assert grad_check(lambda z: tanh(conv2d(z, w, pad=1)).sum(), z) < 1e-6
