import zlib

import numpy as np
import pytest

from MetaHal import Errors
from MetaHal import Ops
from MetaHal.GradCheck import grad_check
from MetaHal.Tensor import Tensor, precision
from MetaHal.Verify import GRAD_CASES, LOOSE_GRAD_OPS

@pytest.mark.parametrize('name', sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    threshold = 1e-4 if name in LOOSE_GRAD_OPS else 1e-5
    with precision(64):
        for _ in range(3):
            closure, inputs = GRAD_CASES[name](rng)
            assert grad_check(closure, inputs) < threshold

class TestConv2d:
    def test_weight_gradient_at_32_bits(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        bias = np.zeros(4)
        closure = lambda w: Ops.sum(Ops.conv2d(Tensor(x), w, Tensor(bias), padding=1))
        with precision(32):
            assert grad_check(closure, [rng.standard_normal((4, 3, 3, 3))], eps=0.1) < 1e-3

    def test_delta_kernel_is_identity(self, rng, f64):
        x = rng.standard_normal((2, 3, 5, 5))
        weight = np.zeros((3, 3, 3, 3))
        for c in range(3):
            weight[c, c, 1, 1] = 1.0
        out = Ops.conv2d(Tensor(x), Tensor(weight), Tensor(np.zeros(3)), padding=1)
        np.testing.assert_allclose(out.data, x)

    def test_stride_output_shape(self, rng):
        out = Ops.conv2d(Tensor(rng.standard_normal((1, 2, 8, 8))), Tensor(np.ones((4, 2, 3, 3))),
                         Tensor(np.zeros(4)), stride=2, padding=1)
        assert out.shape == (1, 4, 4, 4)

    def test_channel_mismatch_names_dims(self):
        with pytest.raises(Errors.ShapeError) as info:
            Ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))
        assert 'input_channels=2' in str(info.value)

class TestPooling:
    def test_max_pool_picks_block_max(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out = Ops.max_pool2d(Tensor(x))
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_odd_dims_rejected(self):
        with pytest.raises(Errors.ShapeError):
            Ops.max_pool2d(Tensor(np.ones((1, 1, 3, 4))))

    def test_upsample_keeps_constants(self):
        out = Ops.upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 7.0)))
        assert out.shape == (1, 2, 6, 6)
        np.testing.assert_allclose(out.data, 7.0, rtol=1e-6)

class TestGridSample:
    def test_identity_grid_reproduces_input(self, rng):
        x = rng.standard_normal((2, 3, 6, 7)).astype(np.float32)
        grid = np.broadcast_to(Ops.base_grid(6, 7, np.float32)[None, ..., :2], (2, 6, 7, 2))
        out = Ops.grid_sample(Tensor(x), Tensor(grid))
        np.testing.assert_array_equal(out.data, x)

    def test_one_pixel_shift_with_zero_padding(self, rng, f64):
        x = rng.standard_normal((1, 1, 4, 5))
        grid = Ops.base_grid(4, 5, np.float64)[None, ..., :2].copy()
        grid[..., 0] += 2.0 / (5 - 1)
        out = Ops.grid_sample(Tensor(x), Tensor(grid)).data
        np.testing.assert_allclose(out[..., :-1], x[..., 1:], atol=1e-12)
        np.testing.assert_allclose(out[..., -1], 0.0)

    def test_one_pixel_shift_with_border_padding(self, rng, f64):
        x = rng.standard_normal((1, 1, 4, 5))
        grid = Ops.base_grid(4, 5, np.float64)[None, ..., :2].copy()
        grid[..., 0] += 2.0 / (5 - 1)
        out = Ops.grid_sample(Tensor(x), Tensor(grid), padding='border').data
        np.testing.assert_allclose(out[..., :-1], x[..., 1:], atol=1e-12)
        np.testing.assert_allclose(out[..., -1], x[..., -1], atol=1e-12)

    def test_border_padding_keeps_a_constant_image_constant(self, f64):
        x = np.full((1, 2, 6, 6), 0.7)
        grid = Ops.base_grid(6, 6, np.float64)[None, ..., :2] * 1.7 + 0.3
        out = Ops.grid_sample(Tensor(x), Tensor(grid), padding='border').data
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_unknown_padding(self):
        grid = Ops.base_grid(2, 2, np.float32)[None, ..., :2]
        with pytest.raises(Errors.ConfigError):
            Ops.grid_sample(Tensor(np.zeros((1, 1, 2, 2))), Tensor(grid), padding='reflect')

    def test_affine_identity_matches_base_grid(self):
        theta = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
        grid = Ops.affine_grid(Tensor(theta), (3, 4)).data
        np.testing.assert_allclose(grid[0], Ops.base_grid(3, 4, grid.dtype)[..., :2])

class TestLossPrimitives:
    def test_soft_dice_of_perfect_prediction(self, f64):
        labels = np.array([[[0, 1], [2, 1]]])
        target = Ops.one_hot(labels, 3)
        assert float(Ops.soft_dice(Tensor(target), Tensor(target)).data) == pytest.approx(1.0, abs=1e-9)

    def test_cross_entropy_rejects_out_of_range_labels(self):
        with pytest.raises(Errors.LabelError):
            Ops.cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 3))

    def test_cross_entropy_of_uniform_logits(self, f64):
        value = Ops.cross_entropy(Tensor(np.zeros((1, 4, 2, 2))), np.zeros((1, 2, 2), dtype=int))
        assert float(value.data) == pytest.approx(np.log(4.0))

    def test_mse_with_empty_mask_is_zero(self):
        out = Ops.mse(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))), weight=np.zeros((1, 1, 2, 2)))
        assert float(out.data) == 0.0

    def test_mse_shape_mismatch(self):
        with pytest.raises(Errors.ShapeError):
            Ops.mse(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_softmax_sums_to_one(self, rng):
        probs = Ops.softmax(Tensor(rng.standard_normal((2, 5, 3, 3))), axis=1).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-6)
