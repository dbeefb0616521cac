import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unept import numerics as nx
from unept.numerics import Tensor


def _loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def _loop_conv(x, kern, stride, padding):
    c_in, h, w = x.shape
    c_out, _, k, _ = kern.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            acc += xp[c, i * stride + u, j * stride + v] * kern[o, c, u, v]
                out[o, i, j] = acc
    return out


def _scalar_bilinear(fmap, y, x):
    """Per-point bilinear lookup with border clamping, written out by hand."""
    _, h, w = fmap.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ty, tx = y - y0, x - x0
    return ((1 - ty) * (1 - tx) * fmap[:, y0, x0] + (1 - ty) * tx * fmap[:, y0, x1]
            + ty * (1 - tx) * fmap[:, y1, x0] + ty * tx * fmap[:, y1, x1])


def _fd_jvp_check(fn, inputs, rng, h=1e-5, tol=1e-4):
    """Compare analytic JVPs with central differences for every input tensor."""
    out = fn(*inputs)
    weights = rng.standard_normal(out.shape)
    loss = (out * Tensor(weights)).sum()
    for t in inputs:
        t.zero_grad()
    loss.backward()
    for t in inputs:
        v = rng.standard_normal(t.shape)
        analytic = float((t.grad * v).sum())
        base = t.data.copy()
        t.data[...] = base + h * v
        fp = float((fn(*inputs).data * weights).sum())
        t.data[...] = base - h * v
        fm = float((fn(*inputs).data * weights).sum())
        t.data[...] = base
        numeric = (fp - fm) / (2 * h)
        assert nx.relative_error(analytic, numeric) < tol, (analytic, numeric)


class TestMatmul:
    def test_identity(self):
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), b).data, b.data)

    def test_projector(self):
        out = nx.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert np.abs(nx.matmul(Tensor(a), Tensor(b)).data - _loop_matmul(a, b)).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
        _fd_jvp_check(nx.matmul, [a, b], rng)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(4))).data, [0.25] * 4, rtol=0, atol=1e-15)

    def test_analytic(self):
        out = nx.softmax(Tensor([0.0, math.log(2.0)])).data
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], rtol=1e-14)

    def test_shift_invariance(self):
        big = nx.softmax(Tensor([1000.0, 1001.0])).data
        assert np.isfinite(big).all()
        np.testing.assert_allclose(big, nx.softmax(Tensor([0.0, 1.0])).data, rtol=1e-14)

    def test_empty_axis(self):
        with pytest.raises(ValueError):
            nx.softmax(Tensor(np.zeros((3, 0))))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
    def test_sums_to_one(self, x):
        out = nx.softmax(Tensor(x), axis=-1).data
        assert (out > 0).all()
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        _fd_jvp_check(lambda t: nx.softmax(t, axis=0), [x], rng)
        _fd_jvp_check(lambda t: nx.log_softmax(t, axis=-1), [x], rng)


class TestLayerNorm:
    def _affine(self, d):
        return Tensor(np.ones(d)), Tensor(np.zeros(d))

    def test_constant_collapses_to_bias(self):
        g, b = self._affine(3)
        np.testing.assert_array_equal(nx.layer_norm(Tensor([5.0, 5.0, 5.0]), g, b).data, [0.0, 0.0, 0.0])

    def test_standardizes(self):
        g, b = self._affine(2)
        out = nx.layer_norm(Tensor([1.0, 3.0]), g, b, eps=1e-14).data
        np.testing.assert_allclose(out, [-1.0, 1.0], rtol=1e-12)

    def test_moments(self):
        rng = np.random.default_rng(4)
        g, b = self._affine(16)
        # the variance deficit is eps / var(x), so the input spread must exceed sqrt(10)
        out = nx.layer_norm(Tensor(rng.standard_normal((5, 16)) * 6 + 2), g, b, eps=1e-5).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-9
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6

    def test_gradients(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        g = Tensor(rng.standard_normal(6), requires_grad=True)
        b = Tensor(rng.standard_normal(6), requires_grad=True)
        _fd_jvp_check(nx.layer_norm, [x, g, b], rng)


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 5, 4))
        kern = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(nx.conv2d(Tensor(x), Tensor(kern)).data, x)

    def test_averaging_constant(self):
        x = np.full((1, 6, 6), 2.5)
        out = nx.conv2d(Tensor(x), Tensor(np.full((1, 1, 3, 3), 1 / 9)), padding=1).data
        np.testing.assert_allclose(out[0, 1:-1, 1:-1], 2.5, rtol=1e-14)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5)])
    def test_against_loop(self, stride, padding, k):
        rng = np.random.default_rng(7)
        x, kern = rng.standard_normal((2, 7, 6)), rng.standard_normal((3, 2, k, k))
        out = nx.conv2d(Tensor(x), Tensor(kern), stride=stride, padding=padding).data
        assert np.abs(out - _loop_conv(x, kern, stride, padding)).max() < 1e-12

    def test_non_positive_extent(self):
        with pytest.raises(ValueError):
            nx.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
    def test_gradients(self, stride, padding):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((2, 6, 6)), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        _fd_jvp_check(lambda x_, k_, b_: nx.conv2d(x_, k_, b_, stride=stride, padding=padding), [x, k, b], rng)


class TestBilinearSample:
    def test_lattice_point(self):
        fmap = np.arange(12, dtype=float).reshape(1, 3, 4)
        out = nx.bilinear_sample(Tensor(fmap), Tensor([[1.0, 2.0]])).data
        assert out[0, 0] == fmap[0, 1, 2]

    def test_mean_of_corners(self):
        out = nx.bilinear_sample(Tensor([[[0.0, 1.0], [2.0, 3.0]]]), Tensor([[0.5, 0.5]])).data
        assert out[0, 0] == 1.5

    def test_against_scalar_oracle(self):
        rng = np.random.default_rng(9)
        fmap = rng.standard_normal((3, 5, 6))
        coords = rng.uniform(-2, 8, size=(40, 2))
        out = nx.bilinear_sample(Tensor(fmap), Tensor(coords)).data
        expected = np.stack([_scalar_bilinear(fmap, y, x) for y, x in coords])
        assert np.abs(out - expected).max() < 1e-13

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
    def test_lattice_is_exact_gather(self, h, w, seed):
        rng = np.random.default_rng(seed)
        fmap = rng.standard_normal((2, h, w))
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(float)
        out = nx.bilinear_sample(Tensor(fmap), Tensor(coords)).data
        np.testing.assert_array_equal(out, fmap.reshape(2, -1).T)

    def test_coordinate_gradient_fd(self):
        rng = np.random.default_rng(10)
        fmap = Tensor(rng.standard_normal((2, 5, 5)))
        coords = rng.uniform(0.1, 3.9, size=(12, 2))
        # keep away from lattice lines where the interpolant has kinks
        coords = np.floor(coords) + np.clip(coords - np.floor(coords), 0.1, 0.9)
        ct = Tensor(coords, requires_grad=True)
        weights = rng.standard_normal((12, 2))
        (nx.bilinear_sample(fmap, ct) * Tensor(weights)).sum().backward()
        h = 1e-5
        for p in range(12):
            for axis in range(2):
                plus, minus = coords.copy(), coords.copy()
                plus[p, axis] += h
                minus[p, axis] -= h
                fp = (nx.bilinear_sample(fmap, Tensor(plus)).data * weights).sum()
                fm = (nx.bilinear_sample(fmap, Tensor(minus)).data * weights).sum()
                numeric = (fp - fm) / (2 * h)
                assert nx.relative_error(ct.grad[p, axis], numeric) < 1e-6

    def test_map_gradient(self):
        rng = np.random.default_rng(11)
        fmap = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
        coords = Tensor(rng.uniform(0.2, 3.7, size=(9, 2)), requires_grad=True)
        _fd_jvp_check(nx.bilinear_sample, [fmap, coords], rng)


class TestNearestSample:
    def test_rounding(self):
        labels = np.arange(20).reshape(4, 5)
        assert nx.nearest_sample(labels, [[1.4, 2.6]])[0] == labels[1, 3]

    def test_half_rounds_up(self):
        labels = np.arange(20).reshape(4, 5)
        assert nx.nearest_sample(labels, [[0.5, 1.5]])[0] == labels[1, 2]

    def test_zero_offsets_identity(self):
        labels = np.random.default_rng(12).integers(0, 4, size=(6, 7))
        ys, xs = np.meshgrid(np.arange(6), np.arange(7), indexing="ij")
        coords = np.stack([ys.ravel(), xs.ravel()], axis=1)
        np.testing.assert_array_equal(nx.nearest_sample(labels, coords), labels.ravel())

    def test_against_round_then_index(self):
        rng = np.random.default_rng(13)
        labels = rng.integers(0, 5, size=(6, 7))
        coords = rng.uniform(-2, 9, size=(50, 2))
        got = nx.nearest_sample(labels, coords)
        for (y, x), v in zip(coords, got):
            yi = min(max(int(math.floor(y + 0.5)), 0), 5)
            xi = min(max(int(math.floor(x + 0.5)), 0), 6)
            assert v == labels[yi, xi]


class TestUpsample:
    def test_factor_one(self):
        x = Tensor(np.random.default_rng(14).standard_normal((2, 3, 3)))
        assert nx.upsample_bilinear(x, 1) is x

    def test_constant(self):
        out = nx.upsample_bilinear(Tensor(np.full((1, 3, 2), 4.0)), 4).data
        np.testing.assert_allclose(out, 4.0, rtol=1e-15)

    def test_against_pointwise_sampling(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((3, 2, 2))
        out = nx.upsample_bilinear(Tensor(x), 2).data
        assert out.shape == (3, 4, 4)
        for i in range(4):
            for j in range(4):
                y, xx = (i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5
                np.testing.assert_allclose(out[:, i, j], _scalar_bilinear(x, y, xx), rtol=0, atol=1e-14)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            nx.upsample_bilinear(Tensor(np.zeros((1, 2, 2))), 0)

    def test_gradients(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        _fd_jvp_check(lambda t: nx.upsample_bilinear(t, 3), [x], rng)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == 6.0

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        (x * x).backward()
        (x * x).backward()
        assert x.grad == 8.0

    def test_linearity(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2)))

        def loss_a():
            return nx.softmax(nx.matmul(x, w), axis=-1).sum(axis=0)[0]

        def loss_b():
            return nx.relu(x).mean() * 3.0

        (loss_a() + loss_b()).backward()
        joint = x.grad.copy()
        x.zero_grad()
        loss_a().backward()
        loss_b().backward()
        np.testing.assert_allclose(joint, x.grad, rtol=1e-13, atol=1e-15)

    def test_shared_node_visited_once(self):
        x = Tensor(1.5, requires_grad=True)
        y = x * x
        z = y + y + y
        z.backward()
        assert x.grad == pytest.approx(9.0, rel=1e-15)

    def test_non_finite_rejected(self):
        with np.errstate(divide="ignore"), pytest.raises(nx.NonFiniteError):
            nx.log(Tensor([0.0]))

    def test_no_grad_blocks_recording(self):
        x = Tensor(1.0, requires_grad=True)
        with nx.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    @pytest.mark.parametrize("op", ["exp", "sigmoid", "relu", "square", "getitem", "concat", "mean"])
    def test_elementwise_gradients(self, op):
        rng = np.random.default_rng(18)
        x = Tensor(rng.standard_normal((3, 4)) + 0.05, requires_grad=True)
        fns = {
            "exp": nx.exp,
            "sigmoid": nx.sigmoid,
            "relu": nx.relu,
            "square": nx.square,
            "getitem": lambda t: t[np.array([0, 2, 0]), np.array([1, 3, 1])],
            "concat": lambda t: nx.concat([t, t[1:]], axis=0),
            "mean": lambda t: t.mean(axis=1),
        }
        _fd_jvp_check(fns[op], [x], rng)
