import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from talkinghead import functional as F
from talkinghead import tensor as T
from talkinghead.errors import ContractError, DimensionError
from talkinghead.tensor import Parameter, Tensor, backward, default_dtype, grad, no_grad


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv2d(x, k, stride, pad):
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                out[oc, i, j] = np.sum(xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw] * k[oc])
    return out


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


class TestTensorBasics:
    def test_dims_match_buffer(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.dims == [2, 3, 4]
        assert np.prod(t.dims) == t.data.size

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_float64_scope(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_full_reduction_keeps_dtype(self):
        t = Tensor(np.ones((4, 3), dtype=np.float64))
        assert t.sum().dtype == np.float64
        assert (t * t).sum(axis=1).mean().dtype == np.float64

    def test_gradient_has_same_dims_and_dtype(self):
        with default_dtype(np.float64):
            p = Parameter(np.ones((2, 3)), name="w")
            g = backward((p * p).sum(), [p])["w"]
        assert g.shape == p.shape and g.dtype == p.dtype

    def test_no_grad_builds_no_graph(self):
        p = Parameter(np.ones(3), name="w")
        with no_grad():
            y = (p * 2.0).sum()
        assert not y.requires_grad


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).uniform(-1, 1, (2, 2)).astype(np.float32)
        assert np.array_equal((Tensor(np.eye(2, dtype=np.float32)) @ Tensor(a)).data, a)

    def test_small_product(self):
        # [[1,2],[3,4]] . [[0],[1]], value frozen from the triple-loop oracle
        a, b = np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]])
        assert np.array_equal(naive_matmul(a, b), [[2.0], [4.0]])
        assert np.array_equal((Tensor(a) @ Tensor(b)).data, [[2.0], [4.0]])

    def test_random_against_loop_oracle(self):
        rng = np.random.default_rng(1)
        with default_dtype(np.float64):
            a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
            np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), rtol=1e-12)

    def test_gradient_of_sum_is_ones_bt(self):
        rng = np.random.default_rng(2)
        with default_dtype(np.float64):
            a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
            ga, gb = grad((a @ b).sum(), [a, b])
        np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
        np.testing.assert_allclose(gb, a.data.T @ np.ones((3, 2)), rtol=1e-12)
        num = central_diff(lambda: (a.data @ b.data).sum(), a.data)
        np.testing.assert_allclose(ga, num, rtol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


class TestConv2d:
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).uniform(-1, 1, (1, 5, 5)).astype(np.float32)
        out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1, pad=0)
        assert np.array_equal(out.data, x)

    def test_ones_kernel_on_ones(self):
        out = F.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 2, 2)
        assert np.all(out.data == 9)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 2), (3, 1)])
    def test_against_sliding_window(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        with default_dtype(np.float64):
            x, k = rng.normal(size=(3, 5, 5)), rng.normal(size=(2, 3, 3, 3))
            out = F.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, naive_conv2d(x, k, stride, pad), rtol=1e-12, atol=1e-12)

    def test_output_extent_formula(self):
        out = F.conv2d(Tensor(np.zeros((2, 9, 7))), Tensor(np.zeros((4, 2, 3, 3))), stride=2, pad=1)
        assert out.shape == (4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_non_positive_extent(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        x, k = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
        batched = F.conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
        for i in range(2):
            np.testing.assert_array_equal(batched[i], F.conv2d(Tensor(x[i]), Tensor(k), stride=2, pad=1).data)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 1.0, 1.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_log2(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, np.log(2.0)])).data, [1 / 3, 2 / 3], rtol=1e-6)

    def test_large_inputs_do_not_overflow(self):
        out = T.softmax(Tensor([1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, x):
        with default_dtype(np.float64):
            out = T.softmax(Tensor(x), axis=1).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestGridSample:
    def test_grid_nodes_exact(self):
        plane = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
        rows, cols = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
        coords = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float32)
        out = F.grid_sample_bilinear(Tensor(plane), Tensor(coords)).data
        np.testing.assert_array_equal(out, plane.reshape(3, -1).T)

    def test_cell_center_is_mean(self):
        plane = np.arange(4.0).reshape(1, 2, 2)
        out = F.grid_sample_bilinear(Tensor(plane), Tensor([[0.5, 0.5]])).data
        np.testing.assert_allclose(out, [[1.5]])

    def test_quarter_point_weights(self):
        # (row 0.25, col 0.75): corner weights frozen from the bilinear formula
        w = {(0, 0): 0.75 * 0.25, (0, 1): 0.75 * 0.75, (1, 0): 0.25 * 0.25, (1, 1): 0.25 * 0.75}
        assert sum(w.values()) == pytest.approx(1.0)
        plane = np.array([[[2.0, 3.0], [5.0, 7.0]]])
        expected = sum(wt * plane[0][r][c] for (r, c), wt in w.items())
        with default_dtype(np.float64):
            out = F.grid_sample_bilinear(Tensor(plane), Tensor([[0.25, 0.75]])).data
        assert out[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_out_of_range_clamps_to_border(self):
        plane = np.arange(6.0).reshape(1, 2, 3)
        with default_dtype(np.float64):
            out = F.grid_sample_bilinear(Tensor(plane), Tensor([[-3.0, -1.0], [5.0, 10.0]])).data
        np.testing.assert_array_equal(out[:, 0], [plane[0, 0, 0], plane[0, 1, 2]])


class TestBackward:
    def test_square(self):
        with default_dtype(np.float64):
            x = Parameter(np.array(3.0), name="x")
            assert backward(x * x, [x])["x"].item() == 6.0

    def test_softmax_matmul_composite_vs_finite_differences(self):
        rng = np.random.default_rng(4)
        with default_dtype(np.float64):
            a = Parameter(rng.normal(size=(3, 4)), name="a")
            b = Parameter(rng.normal(size=(4, 5)), name="b")
            w = rng.normal(size=(3, 5))
            f = lambda: (T.softmax(a @ b, axis=1) * w).sum()  # noqa: E731
            g = backward(f(), [a, b])
            for p in (a, b):
                num = central_diff(lambda: f().item(), p.data)
                np.testing.assert_allclose(g[p.name].data, num, rtol=1e-6, atol=1e-9)

    def test_unreachable_parameter_gets_zero(self):
        x = Parameter(np.ones(3), name="x")
        y = Parameter(np.ones(2), name="y")
        g = backward((x * 2.0).sum(), [x, y])
        assert np.array_equal(g["y"].data, np.zeros(2))

    def test_non_scalar_output_rejected(self):
        x = Parameter(np.ones(3), name="x")
        with pytest.raises(ContractError):
            backward(x * 2.0, [x])

    def test_shared_node_visited_once(self):
        with default_dtype(np.float64):
            x = Parameter(np.array(2.0), name="x")
            y = x * x
            z = y + y + y
            assert backward(z, [x])["x"].item() == pytest.approx(12.0)

    def test_deep_chain_is_iterative(self):
        x = Parameter(np.array(1.0), name="x")
        y = x
        for _ in range(5000):
            y = y + 0.0
        assert backward(y, [x])["x"].item() == 1.0

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(9)
            a = Parameter(rng.normal(size=(5, 5)).astype(np.float32), name="a")
            loss = T.softmax(a @ a, axis=0).sum() + T.tanh(a).mean()
            return loss.data.tobytes(), backward(loss, [a])["a"].data.tobytes()
        assert run() == run()


class TestElementwiseTriples:
    """Identity / symmetry / oracle examples for the remaining elementwise ops."""

    def test_add_zero_identity(self):
        x = np.arange(4.0, dtype=np.float32)
        assert np.array_equal((Tensor(x) + 0.0).data, x)

    def test_mul_commutes(self):
        a, b = Tensor([1.5, -2.0]), Tensor([3.0, 0.25])
        assert np.array_equal((a * b).data, (b * a).data)

    def test_sub_self_is_zero(self):
        a = Tensor([1.5, -2.0])
        assert np.array_equal((a - a).data, [0.0, 0.0])

    def test_exp_log_values(self):
        with default_dtype(np.float64):
            assert T.exp(Tensor(0.0)).item() == 1.0
            assert T.log(T.exp(Tensor([0.3, -1.2]))).data == pytest.approx([0.3, -1.2])

    def test_relu_and_leaky(self):
        x = Tensor([-2.0, 0.0, 3.0])
        assert list(T.relu(x).data) == [0.0, 0.0, 3.0]
        np.testing.assert_allclose(T.leaky_relu(x).data, [-0.4, 0.0, 3.0])

    def test_sigmoid_symmetry(self):
        with default_dtype(np.float64):
            x = Tensor([-2.0, -0.5, 0.0, 0.5, 2.0])
            s = T.sigmoid(x).data
        np.testing.assert_allclose(s + s[::-1], 1.0, rtol=1e-15)
        assert s[2] == 0.5

    def test_concat_split_round_trip(self):
        a, b = np.ones((2, 3)), np.zeros((1, 3))
        out = T.concat([Tensor(a), Tensor(b)], axis=0).data
        assert np.array_equal(out[:2], a) and np.array_equal(out[2:], b)

    def test_reshape_transpose(self):
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(Tensor(x).T.data, x.T)
        assert np.array_equal(Tensor(x).reshape(3, 2).data, x.reshape(3, 2))

    def test_mean_sum(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert x.sum().item() == 15.0
        assert np.array_equal(x.mean(axis=0).data, [1.5, 2.5, 3.5])

    def test_upsample_duplicates(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        out = F.upsample_nearest(x, 2).data
        assert out.shape == (1, 4, 4)
        assert np.array_equal(out[0, :2, :2], np.ones((2, 2)))
        assert np.array_equal(F.avg_pool2d(Tensor(out), 2).data, x.data)

    def test_cumsum_exclusive(self):
        out = T.cumsum_exclusive(Tensor([[1.0, 2.0, 3.0]]), axis=1).data
        assert np.array_equal(out, [[0.0, 1.0, 3.0]])


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-1, 1)),
       hnp.arrays(np.float64, (4, 2), elements=st.floats(-1, 1)))
def test_matmul_tanh_gradient_property(a, b):
    with default_dtype(np.float64):
        ta = Tensor(a.copy(), requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        (ga,) = grad(T.tanh(ta @ tb).sum(), [ta])
        num = central_diff(lambda: np.tanh(ta.data @ b).sum(), ta.data)
    diff = np.abs(ga - num)
    assert np.all((diff <= 1e-4 * np.maximum(np.abs(ga), np.abs(num))) | (diff <= 1e-7))
