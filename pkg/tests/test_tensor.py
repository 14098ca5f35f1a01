import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsdec import tensor as T
from capsdec.tensor import AdamState, DimensionError, Tensor, adam_step, grad_check


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def brute_conv(x, k, b, stride):
    c_out, c_in, kh, kw = k.shape
    _, h, w = x.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += x[c, i * stride + u, j * stride + v] * k[o, c, u, v]
                out[o, i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = f64([[1, 2], [3, 4]])
        np.testing.assert_array_equal(T.matmul(f64(np.eye(2)), a).data, a.data)

    def test_row_times_column(self):
        assert T.matmul(f64([[1, 2]]), f64([[3], [4]])).data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(f64(np.ones((2, 3))), f64(np.ones((2, 3))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4, 5))
        r = rng.uniform(-1, 1, (3, 5))
        assert grad_check(lambda x: (T.matmul(x, f64(b)) * r).sum(), a) < 1e-4
        assert grad_check(lambda x: (T.matmul(f64(a), x) * r).sum(), b) < 1e-4

    def test_batched_broadcast_gradient(self):
        rng = np.random.default_rng(2)
        w = rng.uniform(-1, 1, (4, 3, 2))
        u = rng.uniform(-1, 1, (4, 2, 5))
        r = rng.uniform(-1, 1, (4, 3, 5))
        assert grad_check(lambda x: (T.matmul(x, f64(u)) * r).sum(), w) < 1e-4
        assert grad_check(lambda x: (T.matmul(f64(w), x) * r).sum(), u) < 1e-4


class TestConv2d:
    def test_conv1_shape(self):
        x = Tensor(np.zeros((1, 28, 28), np.float32))
        k = Tensor(np.zeros((256, 1, 9, 9), np.float32))
        assert T.conv2d(x, k, stride=1).shape == (256, 20, 20)

    def test_primary_caps_shape(self):
        x = Tensor(np.zeros((256, 20, 20), np.float32))
        k = Tensor(np.zeros((256, 256, 9, 9), np.float32))
        assert T.conv2d(x, k, stride=2).shape == (256, 6, 6)

    def test_zero_kernels_give_zero_output(self):
        x = Tensor(np.random.default_rng(0).random((3, 10, 10)))
        out = T.conv2d(x, f64(np.zeros((4, 3, 3, 3))), f64(np.zeros(4)), stride=1)
        assert not out.data.any()

    @pytest.mark.parametrize("size,kernel,stride", [(28, 9, 1), (20, 9, 2), (9, 3, 3), (10, 4, 2), (7, 7, 1)])
    def test_output_size_floor_formula(self, size, kernel, stride):
        x = Tensor(np.zeros((1, size, size)))
        out = T.conv2d(x, f64(np.zeros((1, 1, kernel, kernel))), stride=stride)
        expected = (size - kernel) // stride + 1
        assert out.shape == (1, expected, expected)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            T.conv2d(f64(np.zeros((1, 4, 4))), f64(np.zeros((1, 1, 5, 5))))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_brute_force(self, stride):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, (2, 7, 7))
        k = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, 3)
        got = T.conv2d(f64(x), f64(k), f64(b), stride=stride).data
        np.testing.assert_allclose(got, brute_conv(x, k, b, stride), atol=1e-12)

    def test_batched_equals_per_image(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (3, 2, 8, 8))
        k = f64(rng.uniform(-1, 1, (4, 2, 3, 3)))
        batched = T.conv2d(f64(x), k, stride=2).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], T.conv2d(f64(x[i]), k, stride=2).data, atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, stride):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, (2, 2, 7, 7))
        k = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, 3)
        ho = (7 - 3) // stride + 1
        r = rng.uniform(-1, 1, (2, 3, ho, ho))
        assert grad_check(lambda t: (T.conv2d(t, f64(k), f64(b), stride) * r).sum(), x) < 1e-4
        assert grad_check(lambda t: (T.conv2d(f64(x), t, f64(b), stride) * r).sum(), k) < 1e-4
        assert grad_check(lambda t: (T.conv2d(f64(x), f64(k), t, stride) * r).sum(), b) < 1e-4


class TestActivations:
    def test_relu(self):
        assert T.relu(f64([-1, 0, 2])).data.tolist() == [0, 0, 2]

    def test_sigmoid_zero(self):
        assert T.sigmoid(f64(0.0)).data == 0.5

    def test_sigmoid_extremes_are_finite(self):
        out = T.sigmoid(f64([-800.0, 800.0])).data
        assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0

    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax(f64([0, 0, 0])).data, [1 / 3] * 3)

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12), st.integers(0, 1))
    def test_softmax_is_a_distribution(self, values, axis):
        x = np.array(values).reshape(1, -1) if axis else np.array(values).reshape(-1, 1)
        out = T.softmax(f64(x), axis=axis).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-9)


UNARY = {
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "exp": T.exp,
    "softmax0": lambda x: T.softmax(x, axis=0),
    "softmax1": lambda x: T.softmax(x, axis=1),
    "norm": lambda x: T.safe_norm(x, axis=1),
    "sum": lambda x: x.sum(axis=0),
    "mean": lambda x: x.mean(axis=1, keepdims=True),
    "square": lambda x: x ** 2,
    "transpose": lambda x: x.transpose(1, 0),
    "reshape": lambda x: x.reshape(-1),
    "div": lambda x: x / (2.5 + x),
    "sub": lambda x: 1.0 - x * x,
}


@settings(deadline=None, max_examples=40)
@given(st.sampled_from(sorted(UNARY)), st.integers(0, 2 ** 31 - 1))
def test_every_op_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (3, 4))
    if name == "relu":
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    out_shape = UNARY[name](f64(x)).shape
    r = rng.uniform(-1, 1, out_shape)
    assert grad_check(lambda t: (UNARY[name](t) * r).sum(), x, h=1e-5) < 1e-4


class TestAdam:
    def test_zero_gradient_leaves_param(self):
        p = Tensor(np.array([0.3, -1.2], np.float32))
        state = AdamState.for_param(p)
        adam_step(p, np.zeros(2, np.float32), state)
        assert p.data.tolist() == pytest.approx([0.3, -1.2])
        assert state.step_count == 1

    def test_single_step_value(self):
        # m = 0.1, v = 0.001; bias correction makes both 1, so the step is lr / (1 + eps)
        p = Tensor(np.array([1.0]))
        adam_step(p, np.array([1.0]), AdamState.for_param(p))
        assert p.data[0] == pytest.approx(1.0 - 1e-3 / (1 + 1e-8), abs=1e-12)
        assert p.data[0] == pytest.approx(0.999, abs=1e-9)

    def test_step_count_increments(self):
        p = Tensor(np.ones(3))
        s = AdamState.for_param(p)
        for i in range(1, 5):
            adam_step(p, np.ones(3), s)
            assert s.step_count == i

    def test_shape_mismatch(self):
        p = Tensor(np.ones(3))
        with pytest.raises(DimensionError):
            adam_step(p, np.ones(2), AdamState.for_param(p))

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            p = Tensor(rng.standard_normal(10).astype(np.float32))
            s = AdamState.for_param(p)
            for _ in range(20):
                adam_step(p, rng.standard_normal(10).astype(np.float32), s)
            return p.data.tobytes()

        assert run() == run()


class TestGradCheck:
    def test_quadratic(self):
        x = np.array([1.0, 2.0, 3.0])
        xt = Tensor(x, requires_grad=True)
        (xt ** 2).sum().backward()
        assert xt.grad.tolist() == [2.0, 4.0, 6.0]
        assert grad_check(lambda t: (t ** 2).sum(), x) < 1e-6

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        (y + y * x).sum().backward()  # x^2 + x^3 -> 2x + 3x^2
        assert x.grad[0] == pytest.approx(16.0)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_all_values_finite(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
        y = T.softmax(T.sigmoid(x) * 30.0, axis=1).sum() + T.safe_norm(T.relu(x), axis=1).sum()
        y.backward()
        assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(x.grad))

    def test_safe_norm_zero_vector_gradient(self):
        x = Tensor(np.zeros((1, 3)), requires_grad=True)
        T.safe_norm(x, axis=1).sum().backward()
        assert not x.grad.any()

    def test_truncated_normal_bounds(self):
        z = T.truncated_normal(np.random.default_rng(0), (1000,), 0.1)
        assert np.abs(z).max() <= 0.2 + 1e-7
        assert z.dtype == np.float32
