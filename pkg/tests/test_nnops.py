import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relightlab.autograd import Tape, Tensor, reduce_sum
from relightlab.gradcheck import grad_check
from relightlab.nnops import (RunningStats, bicubic_resize, conv2d,
                              normalize_batch, pixel_reshuffle, pool, resample)


def _t64(rng, *shape, lo=-1.0, hi=1.0, grad=True):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=grad, dtype=np.float64)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.random((2, 1, 5, 5)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        np.testing.assert_array_equal(conv2d(x, w, b).data, x.data)

    def test_allones_kernel_sums_window(self):
        c = 0.7
        x = Tensor(np.full((1, 1, 5, 5), c, dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = conv2d(x, w, zero_pad=1)
        assert out.data[0, 0, 2, 2] == pytest.approx(9 * c, rel=1e-6)

    def test_channel_mismatch_diagnostic(self):
        x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((2, 4, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError) as err:
            conv2d(x, w)
        assert "3" in str(err.value) and "4" in str(err.value)

    def test_gradient_fd(self):
        rng = np.random.default_rng(1)
        x = _t64(rng, 2, 2, 5, 5)
        w = _t64(rng, 3, 2, 3, 3)
        b = _t64(rng, 3)
        err = grad_check(lambda x, w, b: conv2d(x, w, b, stride=1, zero_pad=1), [x, w, b])
        assert err < 1e-4

    def test_matches_direct_loop(self):
        """im2col path agrees with an explicit quadruple loop within 1e-6."""
        rng = np.random.default_rng(2)
        x = rng.random((2, 3, 6, 6)).astype(np.float64)
        w = rng.random((4, 3, 3, 3)).astype(np.float64)
        stride, pad = 2, 1
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                     stride=stride, zero_pad=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (6 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, ho))
        for b in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(ho):
                        patch = xp[b, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[b, o, i, j] = (patch * w[o]).sum()
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_dilated_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        x = rng.random((1, 2, 9, 9))
        w = rng.random((2, 2, 3, 3))
        d = 2
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                     zero_pad=d, dilation=d).data
        xp = np.pad(x, ((0, 0), (0, 0), (d, d), (d, d)))
        ref = np.zeros_like(out)
        for o in range(2):
            for i in range(9):
                for j in range(9):
                    acc = 0.0
                    for c in range(2):
                        for ki in range(3):
                            for kj in range(3):
                                acc += xp[0, c, i + ki * d, j + kj * d] * w[o, c, ki, kj]
                    ref[0, o, i, j] = acc
        np.testing.assert_allclose(out, ref, atol=1e-9)


class TestPool:
    def test_avg_example(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
        assert pool("avg", x, 2, 2).data[0, 0, 0, 0] == pytest.approx(2.5)

    def test_max_example(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
        assert pool("max", x, 2, 2).data[0, 0, 0, 0] == pytest.approx(4.0)

    def test_window_too_large_rejected(self):
        x = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError, match="exceeds"):
            pool("avg", x, 4, 1)

    def test_avg_gradient_distributes_uniformly(self):
        rng = np.random.default_rng(4)
        x = _t64(rng, 1, 1, 4, 4)
        with Tape() as tape:
            s = reduce_sum(pool("avg", x, 2, 2))
            tape.backward(s)
        np.testing.assert_allclose(x.grad, np.full((1, 1, 4, 4), 0.25))
        assert grad_check(lambda x: pool("avg", x, 2, 2), [x]) < 1e-6

    def test_global_avg(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.random((2, 3, 4, 5)).astype(np.float32))
        out = pool("global_avg", x, 1)
        assert out.shape == (2, 3, 1, 1)
        np.testing.assert_allclose(out.data[..., 0, 0], x.data.mean(axis=(2, 3)), rtol=1e-6)


class TestPixelReshuffle:
    @settings(max_examples=50, deadline=None)
    @given(b=st.integers(1, 2), c=st.integers(1, 6), hh=st.integers(1, 5),
           ww=st.integers(1, 5), r=st.integers(1, 4))
    def test_shuffle_unshuffle_identity(self, b, c, hh, ww, r):
        rng = np.random.default_rng(0)
        x = Tensor(rng.random((b, c, hh * r, ww * r)).astype(np.float32))
        back = pixel_reshuffle("shuffle", pixel_reshuffle("unshuffle", x, r), r)
        np.testing.assert_array_equal(back.data, x.data)

    def test_unshuffle_shape(self):
        x = Tensor(np.zeros((1, 8, 384, 384), dtype=np.float32))
        assert pixel_reshuffle("unshuffle", x, 2).shape == (1, 32, 192, 192)

    def test_divisibility_rejected(self):
        x = Tensor(np.zeros((1, 3, 5, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="divisible"):
            pixel_reshuffle("unshuffle", x, 2)
        with pytest.raises(ValueError, match="divisible"):
            pixel_reshuffle("shuffle", x, 2)


class TestResample:
    def test_constant_preserved(self):
        x = Tensor(np.full((1, 2, 3, 3), 0.4, dtype=np.float32))
        up = resample("nearest_up", x, 7, 9)
        np.testing.assert_array_equal(up.data, np.full((1, 2, 7, 9), 0.4, dtype=np.float32))
        bi = bicubic_resize(np.full((5, 5), 0.4), 11, 13)
        np.testing.assert_allclose(bi, np.full((11, 13), 0.4), atol=1e-7)

    def test_nearest_up_replicates_blocks(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
        up = resample("nearest_up", x, 4, 4).data[0, 0]
        expect = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
                          dtype=np.float32)
        np.testing.assert_array_equal(up, expect)

    def test_bicubic_reproduces_linear_ramp(self):
        # cubic convolution kernels reproduce linear functions away from edges
        ramp = np.tile(np.linspace(0.0, 1.0, 16), (16, 1))
        out = bicubic_resize(ramp, 16, 32)
        interior = out[:, 4:-4]
        cols = (np.arange(32) + 0.5) * 0.5 - 0.5
        expect = np.tile((cols / 15.0), (16, 1))[:, 4:-4]
        np.testing.assert_allclose(interior, expect, atol=1e-12)

    def test_bicubic_rejected_in_graph(self):
        x = Tensor(np.random.default_rng(0).random((1, 1, 8, 8)).astype(np.float32),
                   requires_grad=True)
        with Tape():
            with pytest.raises(ValueError, match="gradient"):
                resample("bicubic", x, 16, 16)


class TestBatchNorm:
    def test_constant_channel_zeroed(self):
        x = Tensor(np.full((2, 3, 4, 4), 0.8, dtype=np.float32))
        gamma = Tensor(np.ones(3, dtype=np.float32))
        beta = Tensor(np.zeros(3, dtype=np.float32))
        out = normalize_batch(x, gamma, beta, "train", RunningStats.create(3))
        assert np.abs(out.data).max() < 1e-3

    def test_statistics_oracle(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(2.0, 3.0, (4, 2, 8, 8)).astype(np.float32))
        gamma = Tensor(np.array([1.5, 0.5], dtype=np.float32))
        beta = Tensor(np.array([-1.0, 2.0], dtype=np.float32))
        out = normalize_batch(x, gamma, beta, "train", RunningStats.create(2)).data
        for c in range(2):
            assert out[:, c].mean() == pytest.approx(beta.data[c], abs=1e-4)
            assert out[:, c].std() == pytest.approx(abs(gamma.data[c]), abs=1e-4)

    def test_eval_with_batch_stats_matches_train(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.random((3, 2, 5, 5)).astype(np.float32))
        gamma = Tensor(np.array([1.2, 0.7], dtype=np.float32))
        beta = Tensor(np.array([0.1, -0.2], dtype=np.float32))
        train_out = normalize_batch(x, gamma, beta, "train", RunningStats.create(2)).data
        stats = RunningStats(mean=x.data.mean(axis=(0, 2, 3)),
                             var=x.data.var(axis=(0, 2, 3)))
        eval_out = normalize_batch(x, gamma, beta, "eval", stats).data
        np.testing.assert_allclose(eval_out, train_out, atol=1e-6)

    def test_degenerate_single_value_rejected(self):
        x = Tensor(np.zeros((1, 3, 1, 1), dtype=np.float32))
        gamma = Tensor(np.ones(3, dtype=np.float32))
        beta = Tensor(np.zeros(3, dtype=np.float32))
        with pytest.raises(ValueError, match="degenerate"):
            normalize_batch(x, gamma, beta, "train", RunningStats.create(3))

    def test_running_stats_update(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.random((2, 1, 4, 4)).astype(np.float32))
        stats = RunningStats.create(1)
        gamma = Tensor(np.ones(1, dtype=np.float32))
        beta = Tensor(np.zeros(1, dtype=np.float32))
        normalize_batch(x, gamma, beta, "train", stats)
        assert stats.mean[0] == pytest.approx(0.1 * x.data.mean(), rel=1e-5)
        assert stats.var[0] == pytest.approx(0.9 * 1.0 + 0.1 * x.data.var(), rel=1e-5)
