import numpy as np
import pytest
from gradcases import PRIMITIVES, worst_error

from drpdeblur import tensor as T
from drpdeblur.signal_ops import conv2d_direct
from drpdeblur.tensor import AdamState, NonFiniteError, Tensor, adam_step, backward, finite_diff_check


def _naive_conv(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[oc, i, j] = np.sum(patch * w[oc]) + b[oc]
    return out


def _bilinear_1d(n):
    # direct evaluation of half-pixel-centre interpolation with edge clamping
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = (o + 0.5) / 2 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        m[o, min(max(lo, 0), n - 1)] += 1 - frac
        m[o, min(max(lo + 1, 0), n - 1)] += frac
    return m


# ---------------------------------------------------------------- forward values


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    img = rng.random((1, 6, 5))
    out = T.conv2d(Tensor(img), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, img)


def test_soft_shrink_values():
    out = T.soft_shrink(Tensor([1.2, -0.3, 0.0]), 0.5)
    np.testing.assert_allclose(out.data, [0.7, 0.0, 0.0], atol=1e-15)


def test_difference_of_constant_is_zero():
    c = Tensor(np.full((3, 4, 5), 0.7))
    assert not T.diff_h(c).data.any()
    assert not T.diff_v(c).data.any()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_loop(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((3, 8, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, _naive_conv(x, w, b, stride, pad), atol=1e-12)


def test_bilinear_upsample_matches_direct_interpolation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 4))
    out = T.upsample2x(Tensor(x)).data
    expected = np.einsum("ai,cij,bj->cab", _bilinear_1d(5), x, _bilinear_1d(4))
    np.testing.assert_allclose(out, expected, atol=1e-14)


def test_nearest_upsample():
    x = np.arange(4.0).reshape(1, 2, 2)
    out = T.upsample2x(Tensor(x), "nearest").data
    np.testing.assert_array_equal(out[0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_circular_conv_matches_direct():
    rng = np.random.default_rng(2)
    x = rng.random((1, 9, 9))
    k = rng.random((3, 3))
    k /= k.sum()
    np.testing.assert_allclose(T.circular_conv(Tensor(x), k).data, conv2d_direct(x, k), atol=1e-12)


def test_reductions_and_elementwise():
    a = np.array([[1.0, -2.0], [3.0, -4.0]])
    assert T.tsum(Tensor(a)).item() == -2.0
    assert T.mean(Tensor(a)).item() == -0.5
    assert T.frob_sq(Tensor(a)).item() == 30.0
    np.testing.assert_array_equal(T.tabs(Tensor(a)).data, np.abs(a))
    np.testing.assert_array_equal(T.square(Tensor(a)).data, a * a)
    np.testing.assert_allclose(T.sigmoid(Tensor(np.array([0.0, 800.0, -800.0]))).data, [0.5, 1.0, 0.0])
    np.testing.assert_array_equal(T.leaky_relu(Tensor(a), 0.1).data, np.where(a > 0, a, 0.1 * a))


# ---------------------------------------------------------------- errors


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.mul(Tensor(np.array([1e300])), Tensor(np.array([1e300])))


def test_backward_requires_scalar():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(T.mul(p, 2.0))


# ---------------------------------------------------------------- backward


def test_sum_gradient_is_ones():
    p = Tensor(np.random.default_rng(0).random((2, 3, 4)), requires_grad=True)
    (g,) = backward(T.tsum(p), [p])
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))


def test_frob_sq_gradient():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    (g,) = backward(T.frob_sq(p), [p])
    np.testing.assert_array_equal(g, [2.0, -4.0])


def test_untouched_parameter_gets_zero_gradient():
    p = Tensor(np.ones(3), requires_grad=True)
    q = Tensor(np.ones(2), requires_grad=True)
    gp, gq = backward(T.tsum(p), [p, q])
    np.testing.assert_array_equal(gq, np.zeros(2))


def _two_layer_net(x, w1, b1, w2, b2):
    def f(p):
        h = T.leaky_relu(T.conv2d(p, w1, b1, stride=2, padding=1), 0.2)
        h = T.sigmoid(T.conv2d(h, w2, b2, padding=1))
        return T.tsum(T.mul(h, x))

    return f


def test_random_two_layer_conv_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    w1 = Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.5)
    b1 = Tensor(rng.standard_normal(4) * 0.1)
    w2 = Tensor(rng.standard_normal((2, 4, 3, 3)) * 0.5)
    b2 = Tensor(rng.standard_normal(2) * 0.1)
    weight = rng.standard_normal((2, 4, 4))
    f = _two_layer_net(weight, w1, b1, w2, b2)
    point = rng.standard_normal((2, 8, 8))
    pre = T.conv2d(Tensor(point), w1, b1, stride=2, padding=1).data
    assert np.abs(pre).min() > 1e-3  # no leaky-ReLU kink within probe range

    assert finite_diff_check(f, point, h=1e-5) < 1e-4


def test_linearity_of_backward():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((2, 6, 6))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))

    def f(p):
        return T.frob_sq(T.conv2d(p, w, padding=1))

    def g(p):
        return T.tsum(T.sigmoid(T.upsample2x(p)))

    a, b = 0.7, -1.3
    p = Tensor(x0, requires_grad=True)
    (gf,) = backward(f(p), [p])
    (gg,) = backward(g(p), [p])
    (gc,) = backward(T.add(T.mul(f(p), a), T.mul(g(p), b)), [p])
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12, atol=1e-12)


def test_backward_deterministic():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))

    def grad():
        p = Tensor(x0.copy(), requires_grad=True)
        (g,) = backward(T.frob_sq(T.conv2d(p, Tensor(w), stride=2, padding=1)), [p])
        return g

    assert np.array_equal(grad(), grad())


def test_shared_subexpression_accumulates():
    p = Tensor(np.array([3.0]), requires_grad=True)
    q = T.mul(p, p)
    (g,) = backward(T.tsum(T.add(q, q)), [p])
    np.testing.assert_allclose(g, [12.0])


# ---------------------------------------------------------------- finite_diff_check


def test_fd_check_on_quadratic():
    err = finite_diff_check(lambda p: T.tsum(T.square(p)), np.array([1.0, 2.0, 3.0]))
    assert err < 1e-7


def test_fd_check_soft_shrink_away_from_kink():
    err = finite_diff_check(lambda p: T.tsum(T.soft_shrink(p, 0.5)), np.array([2.0, -2.0]))
    assert err < 1e-6


def test_fd_check_skips_kink_coordinates():
    # at p = 0 the central difference of |p| is 0 while sign(0) = 0 too; the
    # coordinate must be excluded rather than compared
    calls = []

    def f(p):
        calls.append(1)
        return T.tsum(T.tabs(p))

    err = finite_diff_check(f, np.array([0.0, 1.0]), kink_fn=np.abs)
    assert err < 1e-8
    assert len(calls) == 1 + 2  # one analytic pass, one probe pair for x = 1


def test_fd_check_reports_non_finite():
    def f(p):
        return Tensor(np.array(np.inf)) if p.data[0] > 1.0 else T.tsum(p)

    with pytest.raises(NonFiniteError):
        finite_diff_check(f, np.array([1.0]), h=1e-3)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_identity():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    state = AdamState.zeros_like([p])
    adam_step([p], [np.zeros(3)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])
    assert state.step_count == 1


def test_adam_first_step_hand_evaluated():
    # m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; step = 0.1 * 1 / (1 + 1e-8)
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState.zeros_like([p])
    adam_step([p], [np.array([1.0])], state, lr=0.1)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert state.second_moment[0][0] >= 0


def test_adam_descends_on_quadratic():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState.zeros_like([p])
    values = [1.0]
    for _ in range(2):
        (g,) = backward(T.tsum(T.square(p)), [p])
        adam_step([p], [g], state, lr=0.1)
        values.append(float(p.data[0] ** 2))
    assert values[0] > values[1] > values[2]
    assert state.step_count == 2


def test_adam_rejects_bad_input():
    p = Tensor(np.ones(2), requires_grad=True)
    state = AdamState.zeros_like([p])
    with pytest.raises(ValueError):
        adam_step([p], [np.ones(3)], state, lr=0.1)
    with pytest.raises(NonFiniteError):
        adam_step([p], [np.array([np.nan, 0.0])], state, lr=0.1)


# ---------------------------------------------------------------- properties


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    assert worst_error(name, trials=100) < 1e-4
