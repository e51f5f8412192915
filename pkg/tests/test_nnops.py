"""Convolution, batch norm, bilinear sampling/resizing: values and gradients."""

import numpy as np
import pytest

import depthadapt.tensor as T
from depthadapt import nnops
from depthadapt.gradcheck import max_rel_error, numeric_gradient
from depthadapt.nnops import (BatchNormState, batchnorm2d, conv2d, grid_sample_bilinear,
                              mean_pool3x3, upsample_bilinear)
from depthadapt.tensor import Tensor, reduce


def _proj_loss(out, co):
    return reduce("sum", T.mul(out, Tensor(co, dtype=np.float64)))


class TestConv2d:
    def test_all_ones_center_is_nine(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = conv2d(x, w, stride=1, padding=1)
        assert y.data[0, 0, 1, 1] == pytest.approx(9.0)

    def test_depthwise_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = np.zeros((3, 1, 3, 3), dtype=np.float32)
        w[:, 0, 1, 1] = 1.0
        y = conv2d(x, Tensor(w), stride=1, padding=1, groups=3)
        assert np.array_equal(y.data, x.data)

    def test_weight_gradient_finite_differences(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), dtype=np.float64, requires_grad=True)
        co = rng.normal(size=(2, 4, 8, 8))
        _proj_loss(conv2d(x, w, stride=1, padding=1), co).backward()
        num = numeric_gradient(
            lambda: float((conv2d(Tensor(x.data), Tensor(w.data), stride=1, padding=1).data * co).sum()),
            w.data)
        assert max_rel_error(w.grad, num) < 1e-5

    def test_incompatible_channels_rejected(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))
        with pytest.raises(ValueError):
            conv2d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((2, 2, 3, 3))), groups=3)

    def test_output_shape_stride2(self):
        y = conv2d(Tensor(np.zeros((2, 3, 8, 12))), Tensor(np.zeros((5, 3, 3, 3))),
                   stride=2, padding=1)
        assert y.shape == (2, 5, 4, 6)

    @pytest.mark.parametrize("seed", range(5))
    def test_grouped_conv_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(1, 4, 5, 5)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(6, 2, 3, 3)), dtype=np.float64, requires_grad=True)
        co = rng.normal(size=(1, 6, 5, 5))
        _proj_loss(conv2d(x, w, stride=1, padding=1, groups=2), co).backward()
        for leaf in (x, w):
            num = numeric_gradient(
                lambda: float((conv2d(Tensor(x.data), Tensor(w.data),
                                      stride=1, padding=1, groups=2).data * co).sum()),
                leaf.data)
            assert max_rel_error(leaf.grad, num) < 1e-5


class TestBatchNorm:
    def test_eval_identity_with_unit_stats(self):
        st = BatchNormState(3)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)).astype(np.float32))
        y = batchnorm2d(x, st, "eval")
        assert np.allclose(y.data, x.data, atol=1e-5)

    def test_train_constant_input_gives_beta(self):
        st = BatchNormState(2)
        st.beta.data = np.array([0.3, -0.7], dtype=np.float32)
        x = Tensor(np.full((2, 2, 3, 3), 5.0, dtype=np.float32))
        y = batchnorm2d(x, st, "train")
        assert np.allclose(y.data[:, 0], 0.3, atol=1e-6)
        assert np.allclose(y.data[:, 1], -0.7, atol=1e-6)

    def test_running_stats_update_and_nonnegative_var(self):
        st = BatchNormState(2, momentum=0.5)
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 2, 5, 5)).astype(np.float32))
        batchnorm2d(x, st, "train")
        assert np.all(st.running_var >= 0)
        # one update moves the zero-init mean halfway to the batch mean
        assert st.running_mean == pytest.approx(0.5 * x.data.mean(axis=(0, 2, 3)), abs=1e-5)

    def test_eval_uses_running_stats_only(self):
        st = BatchNormState(1)
        st.running_mean = np.array([2.0], dtype=np.float32)
        st.running_var = np.array([4.0], dtype=np.float32)
        x = Tensor(np.full((1, 1, 2, 2), 4.0, dtype=np.float32))
        y = batchnorm2d(x, st, "eval")
        assert np.allclose(y.data, (4.0 - 2.0) / np.sqrt(4.0 + st.eps), atol=1e-6)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 4, 5, 5)), dtype=np.float64, requires_grad=True)
        st = BatchNormState(4, dtype=np.float64)
        st.gamma.data = rng.normal(1, 0.2, 4)
        st.beta.data = rng.normal(0, 0.2, 4)
        co = rng.normal(size=(2, 4, 5, 5))
        _proj_loss(batchnorm2d(x, st, "train", update_running=False), co).backward()

        def f():
            return float((batchnorm2d(Tensor(x.data), st, "train", update_running=False).data
                          * co).sum())

        # x.grad flows through the batch statistics
        num = numeric_gradient(f, x.data)
        assert max_rel_error(x.grad, num) < 1e-5

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            batchnorm2d(Tensor(np.zeros((0, 2, 2, 2))), BatchNormState(2), "train")

    def test_rank_and_channel_checks(self):
        with pytest.raises(ValueError):
            batchnorm2d(Tensor(np.zeros((2, 2))), BatchNormState(2), "train")
        with pytest.raises(ValueError):
            batchnorm2d(Tensor(np.zeros((1, 3, 2, 2))), BatchNormState(2), "train")


def identity_grid(h, w):
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    g = np.stack([gx / (w - 1) * 2.0 - 1.0, gy / (h - 1) * 2.0 - 1.0], axis=-1)
    return g[None].astype(np.float64)


class TestGridSample:
    def test_identity_grid_is_exact(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(1, 3, 5, 7)), dtype=np.float64)
        y = grid_sample_bilinear(x, Tensor(identity_grid(5, 7), dtype=np.float64))
        assert np.array_equal(y.data, x.data)

    def test_horizontal_midpoint_interpolation(self):
        img = np.zeros((1, 1, 1, 2))
        img[0, 0, 0] = [2.0, 4.0]
        grid = np.array([[[[0.0, -1.0]]]])  # x midway, y at row 0
        y = grid_sample_bilinear(Tensor(img, dtype=np.float64), Tensor(grid, dtype=np.float64))
        assert y.data.ravel()[0] == pytest.approx(3.0)

    def test_border_padding_clamps(self):
        img = np.arange(4.0).reshape(1, 1, 1, 4)
        grid = np.array([[[[-2.0, -1.0], [2.0, -1.0]]]])
        y = grid_sample_bilinear(Tensor(img), Tensor(np.asarray(grid, np.float32)), "border")
        assert np.array_equal(y.data.ravel(), [0.0, 3.0])

    def test_zeros_padding_reads_zero(self):
        img = np.ones((1, 1, 2, 2))
        grid = np.array([[[[-3.0, -3.0]]]])
        y = grid_sample_bilinear(Tensor(img, dtype=np.float64),
                                 Tensor(grid, dtype=np.float64), "zeros")
        assert y.data.ravel()[0] == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_grid_gradient_finite_differences(self, seed):
        """Gradient w.r.t. grid carries the spatial image gradient (tol 1e-4)."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(1, 1, 6, 6)), dtype=np.float64, requires_grad=True)
        px = np.floor(rng.uniform(0, 4, (1, 3, 3))) + rng.uniform(0.25, 0.75, (1, 3, 3))
        py = np.floor(rng.uniform(0, 4, (1, 3, 3))) + rng.uniform(0.25, 0.75, (1, 3, 3))
        grid = Tensor(np.stack([px / 5 * 2 - 1, py / 5 * 2 - 1], -1),
                      dtype=np.float64, requires_grad=True)
        pad = "border" if seed % 2 else "zeros"
        co = rng.normal(size=(1, 1, 3, 3))
        _proj_loss(grid_sample_bilinear(x, grid, pad), co).backward()
        for leaf in (grid, x):
            num = numeric_gradient(
                lambda: float((grid_sample_bilinear(Tensor(x.data), Tensor(grid.data), pad).data
                               * co).sum()),
                leaf.data)
            assert max_rel_error(leaf.grad, num) < 1e-4

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            grid_sample_bilinear(Tensor(np.zeros((2, 1, 4, 4))),
                                 Tensor(np.zeros((1, 2, 2, 2))))
        with pytest.raises(ValueError):
            grid_sample_bilinear(Tensor(np.zeros((1, 1, 4, 4))),
                                 Tensor(np.zeros((1, 2, 2, 2))), padding="bogus")


class TestUpsample:
    def test_same_size_is_identity(self):
        x = Tensor(np.random.default_rng(5).normal(size=(2, 3, 4, 6)))
        y = upsample_bilinear(x, 4, 6)
        assert np.array_equal(y.data, x.data)

    def test_hand_interpolated_2x2_to_4x4(self):
        x = Tensor(np.array([[[[0.0, 2.0], [4.0, 6.0]]]]), dtype=np.float64)
        y = upsample_bilinear(x, 4, 4)
        expect = np.array([
            [0, 2 / 3, 4 / 3, 2],
            [4 / 3, 2, 8 / 3, 10 / 3],
            [8 / 3, 10 / 3, 4, 14 / 3],
            [4, 14 / 3, 16 / 3, 6],
        ])
        assert np.allclose(y.data[0, 0], expect, atol=1e-12)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(1, 2, 3, 4)), dtype=np.float64, requires_grad=True)
        co = rng.normal(size=(1, 2, 7, 9))
        _proj_loss(upsample_bilinear(x, 7, 9), co).backward()
        num = numeric_gradient(
            lambda: float((upsample_bilinear(Tensor(x.data), 7, 9).data * co).sum()), x.data)
        assert max_rel_error(x.grad, num) < 1e-5

    def test_bad_dims_rejected(self):
        with pytest.raises(ValueError):
            upsample_bilinear(Tensor(np.zeros((1, 1, 2, 2))), 0, 4)


class TestMeanPool:
    def test_matches_brute_force_windows(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 2, 5, 6))
        out = mean_pool3x3(Tensor(x, dtype=np.float64)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for i in range(5):
            for j in range(6):
                win = xp[:, :, i:i + 3, j:j + 3]
                assert np.allclose(out[:, :, i, j], win.sum(axis=(2, 3)) / 9.0, atol=1e-12)
