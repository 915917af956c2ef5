import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopdet import tensor as T
from coopdet.errors import DimensionError, EvaluationError, NonFiniteError
from coopdet.gradcheck import grad_check
from coopdet.tensor import Tape, Tensor


def brute_conv(x, k, dilation=1, stride=1, pad=0):
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for y in range(ho):
            for z in range(wo):
                acc = 0.0
                for ic in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            acc += k[oc, ic, i, j] * xp[ic, y * stride + i * dilation, z * stride + j * dilation]
                out[oc, y, z] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(2, 2))
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_computed(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_grad_is_row_broadcast_of_column_sums(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)))
        with Tape() as tape:
            s = T.matmul(a, b).sum()
        (ga,) = tape.gradient(s, [a])
        expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
        np.testing.assert_allclose(ga, expected, rtol=1e-12)
        report = grad_check(lambda: T.matmul(a, b).sum(), [a])
        assert report.max_rel_error < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_values(self):
        # direct evaluation: exp(k) / (e + e^2 + e^3)
        z = math.e + math.e ** 2 + math.e ** 3
        expected = [math.e / z, math.e ** 2 / z, math.e ** 3 / z]
        out = T.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(out, expected, rtol=1e-14)
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)

    def test_stabilized(self):
        out = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)

    def test_empty(self):
        with pytest.raises(DimensionError):
            T.softmax_lastdim(Tensor(np.zeros((3, 0))))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**31))
    def test_rows_sum_to_one(self, shape, seed):
        x = np.random.default_rng(seed).normal(scale=10, size=shape)
        out = T.softmax_lastdim(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


class TestConv:
    def test_center_delta_is_identity_bit_exact(self):
        x = np.random.default_rng(2).normal(size=(3, 6, 5))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = T.conv2d(Tensor(x), Tensor(k))
        assert np.array_equal(out.data, x)

    def test_ones_kernel_on_constant(self):
        out = T.conv2d(Tensor(np.full((1, 5, 5), 2.5)), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 9 * 2.5)

    def test_dilation_two_touches_offsets(self):
        x = np.zeros((1, 9, 9))
        x[0, 4, 4] = 1.0
        k = np.random.default_rng(3).uniform(0.5, 1.5, size=(1, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), dilation=2).data
        oracle = brute_conv(x, k, dilation=2, pad=2)
        np.testing.assert_allclose(out, oracle, rtol=1e-13)
        rows, cols = np.nonzero(out[0])
        assert set(rows - 4) == {-2, 0, 2} and set(cols - 4) == {-2, 0, 2}

    @pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 3), (2, 2)])
    def test_matches_brute_force(self, stride, dilation):
        rng = np.random.default_rng(stride * 10 + dilation)
        x = rng.normal(size=(2, 7, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=stride, dilation=dilation).data
        np.testing.assert_allclose(out, brute_conv(x, k, dilation, stride, dilation), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_even_kernel_same_padding(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


class TestPooling:
    def test_constant(self):
        np.testing.assert_allclose(T.global_avg_pool(Tensor(np.full((2, 3, 3), 1.5))).data, [1.5, 1.5])

    def test_mean(self):
        assert T.global_avg_pool(Tensor([[[1, 3], [5, 7]]])).data[0] == 4

    def test_zero(self):
        np.testing.assert_array_equal(T.global_avg_pool(Tensor(np.zeros((4, 2, 2)))).data, 0)


class TestGradCheck:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        report = grad_check(lambda: (x * x).sum(), [x])
        assert report.entries[0].analytic == pytest.approx(6.0)
        assert report.max_rel_error < 1e-9

    def test_softmax_weighted_sum(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=4), requires_grad=True)
        w = Tensor(rng.normal(size=4))
        report = grad_check(lambda: (T.softmax_lastdim(x) * w).sum(), [x])
        assert report.max_rel_error < 1e-6

    def test_dilated_conv_pool(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        w = Tensor(rng.normal(size=3))

        def f():
            return (T.global_avg_pool(T.conv2d(x, k, b, dilation=2)) * w).sum()

        assert grad_check(f, [x, k, b]).max_rel_error < 1e-5

    def test_non_finite_raises(self):
        x = Tensor([0.0], requires_grad=True)
        with pytest.raises(EvaluationError):
            grad_check(lambda: T.log(x).sum(), [x])

    def test_requires_float64(self):
        with T.precision(np.float32):
            x = Tensor([1.0], requires_grad=True)
        with pytest.raises(EvaluationError):
            grad_check(lambda: (x * x).sum(), [x])


def test_fan_out_accumulates_exactly():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    w = Tensor([2.0, 4.0, 0.5])
    with Tape() as tape:
        single = (x * w).sum()
    (g1,) = tape.gradient(single, [x])
    for k in (2, 3, 4, 5):
        with Tape() as tape:
            total = (x * w).sum()
            for _ in range(k - 1):
                total = total + (x * w).sum()
        (gk,) = tape.gradient(total, [x])
        assert np.array_equal(gk, k * g1)
    y = Tensor(np.random.default_rng(6).normal(size=5), requires_grad=True)
    with Tape() as tape:
        z = T.exp(y)
        s = (z + z + z).sum()
    (g,) = tape.gradient(s, [y])
    np.testing.assert_allclose(g, 3 * np.exp(y.data), rtol=1e-15)


def test_backward_is_exact_reverse_of_execution():
    x = Tensor([0.5], requires_grad=True)
    with Tape() as tape:
        a = T.exp(x)
        b = T.log(a + 1)
        c = b * a
    names = [e[3] for e in tape.entries]
    assert names == ["exp", "add", "log", "mul"]
    (g,) = tape.gradient(c, [x])
    ex = math.exp(0.5)
    assert g[0] == pytest.approx(ex / (ex + 1) * ex + math.log(ex + 1) * ex, rel=1e-14)


def test_non_finite_intermediate_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([-1.0]))
    with pytest.raises(NonFiniteError):
        T.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1e4]))


def test_no_tape_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2
    assert not y.requires_grad


def test_runtime_precision():
    with T.precision(np.float32):
        x = Tensor(np.ones((2, 3)))
        y = T.softmax_lastdim(x * 2.0)
    assert x.dtype == np.float32 and y.dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


_RNG = np.random.default_rng(7)


def _rand(*shape, positive=False):
    x = _RNG.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _away_from_zero(*shape):
    x = _RNG.normal(size=shape)
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    return Tensor(x, requires_grad=True)


OPS = {
    "add": lambda: ((a := _rand(3, 4)), (b := _rand(4)), lambda: T.add(a, b), [a, b]),
    "sub": lambda: ((a := _rand(3, 1)), (b := _rand(3, 4)), lambda: T.sub(a, b), [a, b]),
    "mul": lambda: ((a := _rand(2, 3)), (b := _rand(2, 3)), lambda: T.mul(a, b), [a, b]),
    "div": lambda: ((a := _rand(2, 3)), (b := _rand(2, 3, positive=True)), lambda: T.div(a, b), [a, b]),
    "neg": lambda: ((a := _rand(5)), None, lambda: T.neg(a), [a]),
    "power": lambda: ((a := _rand(5, positive=True)), None, lambda: T.power(a, -0.5), [a]),
    "exp": lambda: ((a := _rand(2, 2)), None, lambda: T.exp(a), [a]),
    "log": lambda: ((a := _rand(6, positive=True)), None, lambda: T.log(a), [a]),
    "relu": lambda: ((a := _away_from_zero(3, 4)), None, lambda: T.relu(a), [a]),
    "sigmoid": lambda: ((a := _rand(8)), None, lambda: T.sigmoid(a), [a]),
    "softplus": lambda: ((a := _rand(8)), None, lambda: T.softplus(a), [a]),
    "smooth_l1": lambda: ((a := _away_from_zero(10)), None, lambda: T.smooth_l1(a, 3.0), [a]),
    "where": lambda: ((a := _rand(6)), (b := _rand(6)),
                      lambda: T.where(np.array([1, 0, 1, 1, 0, 0], bool), a, b), [a, b]),
    "sum": lambda: ((a := _rand(2, 3, 4)), None, lambda: T.sum_(a, axis=1), [a]),
    "mean": lambda: ((a := _rand(2, 3, 4)), None, lambda: T.mean(a, axis=(0, 2), keepdims=True), [a]),
    "max": lambda: ((a := _rand(3, 5)), None, lambda: T.max_(a, axis=1), [a]),
    "softmax": lambda: ((a := _rand(3, 4)), None, lambda: T.softmax_lastdim(a), [a]),
    "log_softmax": lambda: ((a := _rand(3, 4)), None, lambda: T.log_softmax_lastdim(a), [a]),
    "reshape": lambda: ((a := _rand(2, 6)), None, lambda: T.reshape(a, (3, 4)), [a]),
    "transpose": lambda: ((a := _rand(2, 3, 4)), None, lambda: T.transpose(a, (2, 0, 1)), [a]),
    "getitem": lambda: ((a := _rand(4, 5)), None, lambda: a[np.array([0, 2, 2]), 1:4], [a]),
    "concat": lambda: ((a := _rand(2, 3)), (b := _rand(4, 3)), lambda: T.concat([a, b], axis=0), [a, b]),
    "stack": lambda: ((a := _rand(2, 3)), (b := _rand(2, 3)), lambda: T.stack([a, b], axis=1), [a, b]),
    "pad": lambda: ((a := _rand(2, 3)), None, lambda: T.pad(a, [(1, 0), (2, 1)]), [a]),
    "roll": lambda: ((a := _rand(4, 5)), None, lambda: T.roll(a, (1, -2), (0, 1)), [a]),
    "scatter": lambda: ((a := _rand(3, 2)), None,
                        lambda: T.scatter(a, (np.array([0, 3, 1]), slice(None)), (5, 2)), [a]),
    "matmul": lambda: ((a := _rand(2, 3, 4)), (b := _rand(4, 2)), lambda: T.matmul(a, b), [a, b]),
    "conv2d": lambda: ((a := _rand(2, 2, 5, 4)), (b := _rand(3, 2, 3, 3)),
                       lambda: T.conv2d(a, b, stride=2, dilation=1), [a, b]),
    "global_avg_pool": lambda: ((a := _rand(3, 4, 2)), None, lambda: T.global_avg_pool(a), [a]),
    "avg_pool2": lambda: ((a := _rand(2, 5, 3)), None, lambda: T.avg_pool2(a), [a]),
    "resize_bilinear": lambda: ((a := _rand(2, 3, 2)), None, lambda: T.resize_bilinear(a, (6, 4)), [a]),
    "channel_norm": lambda: ((a := _rand(3, 4, 4)), (b := _rand(3)),
                             lambda: T.channel_norm(a, b, Tensor(np.zeros(3))), [a, b]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check(name):
    a, b, fn, params = OPS[name]()
    w = Tensor(_RNG.normal(size=fn().shape))
    report = grad_check(lambda: (fn() * w).sum(), params)
    assert report.max_rel_error < 1e-5, (name, report.worst())
