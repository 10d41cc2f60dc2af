import math

import numpy as np
import pytest

from MetaHal import Errors
from MetaHal.Losses import (LossWeights, NoiseConfig, ScheduleConfig, consistency_loss, lr_schedule, ramp_weight,
                            seg_loss, smoothness_loss, validity_mask, weights_at)
from MetaHal.Nets import SpatialTransform, init_segmenter, warp
from MetaHal.Tensor import Tape, Tensor, backward

class TestSchedules:
    def test_ramp_endpoints(self):
        cfg = ScheduleConfig()
        assert ramp_weight(cfg.horizon, cfg) == 10.0
        assert ramp_weight(0, cfg) == pytest.approx(0.0673794700, abs=1e-9)

    def test_ramp_clamps_outside_horizon(self):
        cfg = ScheduleConfig()
        assert ramp_weight(-5, cfg) == ramp_weight(0, cfg)
        assert ramp_weight(400, cfg) == 10.0

    def test_ramp_is_monotone(self):
        cfg = ScheduleConfig()
        values = [ramp_weight(t, cfg) for t in range(cfg.horizon + 1)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_warmup_is_linear(self):
        cfg = ScheduleConfig()
        assert lr_schedule(0, cfg) == 0.0
        assert lr_schedule(30, cfg) == 0.005
        assert lr_schedule(15, cfg) == pytest.approx(0.0025, abs=1e-12)
        assert lr_schedule(149, cfg) == 0.005

    def test_weights_share_the_ramp(self):
        weights = weights_at(75, ScheduleConfig())
        assert weights.lambda_con == weights.lambda_trans == ramp_weight(75, ScheduleConfig())

    def test_invalid_schedule(self):
        with pytest.raises(Errors.ConfigError):
            ScheduleConfig(horizon=0)
        with pytest.raises(Errors.ConfigError):
            ScheduleConfig(horizon=10, warmup_epochs=11)

    def test_negative_weight_rejected(self):
        with pytest.raises(Errors.ConfigError):
            LossWeights(lambda_trans=-1.0)
        with pytest.raises(Errors.ConfigError):
            LossWeights(lambda_con=math.nan)

class TestSegLoss:
    def test_confident_correct_prediction_is_near_zero(self, f64):
        labels = np.array([[[0, 1], [2, 3]]])
        logits = np.moveaxis(np.eye(4)[labels], -1, 1) * 50.0
        assert float(seg_loss(Tensor(logits), labels).data) < 1e-4

    def test_label_range_checked(self):
        with pytest.raises(Errors.LabelError):
            seg_loss(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 5))

class TestConsistency:
    def test_null_case(self, rng, f64):
        params = init_segmenter(rng, depth=1, base=2, classes=3)
        x = rng.standard_normal((2, 1, 8, 8))
        value = consistency_loss(params, params.copy(), SpatialTransform.identity(2), x)
        assert float(value.data) < 1e-10

    def test_plain_mean_teacher_null_case(self, rng, f64):
        params = init_segmenter(rng, depth=1, base=2, classes=3)
        x = rng.standard_normal((2, 1, 8, 8))
        assert float(consistency_loss(params, params.copy(), None, x).data) < 1e-10

    def test_noise_makes_branches_differ(self, rng, f64):
        params = init_segmenter(rng, depth=1, base=2, classes=3)
        x = rng.standard_normal((2, 1, 8, 8))
        value = consistency_loss(params, params.copy(), None, x, NoiseConfig(0.5), np.random.default_rng(3))
        assert float(value.data) > 0

    def test_validity_mask_excludes_padding(self):
        mask = validity_mask(SpatialTransform.translation(0.5, 0.0), (1, 1, 5, 5))
        assert mask[..., :-1].all()
        assert not mask[..., -1].any()

    def test_constant_image_is_equivariant_away_from_the_border(self, rng, f64):
        params = init_segmenter(rng, depth=1, base=2, classes=3)
        x = np.full((2, 1, 64, 64), 0.7)
        region = np.zeros((64, 64))
        region[16:48, 16:48] = 1.0
        for angle in (0.05, -0.1):
            transform = SpatialTransform.rotation([angle, angle / 2])
            value = consistency_loss(params, params.copy(), transform, x, region=region)
            assert float(value.data) < 1e-6

    def test_constant_image_student_input_stays_constant(self, f64):
        moved = warp(np.full((1, 1, 16, 16), 0.7), SpatialTransform.rotation([0.1]), padding='border').data
        np.testing.assert_allclose(moved, 0.7, atol=1e-12)

    def test_batch_order_does_not_matter(self, rng, f64):
        params = init_segmenter(rng, depth=1, base=2, classes=3)
        teacher = init_segmenter(np.random.default_rng(9), depth=1, base=2, classes=3)
        x = rng.standard_normal((3, 1, 16, 16))
        transform = SpatialTransform.rotation([0.2, -0.1, 0.05])
        order = np.array([2, 0, 1])
        value = consistency_loss(params, teacher, transform, x)
        shuffled = consistency_loss(params, teacher, transform.select(order), x[order])
        assert float(shuffled.data) == pytest.approx(float(value.data), rel=1e-10)

    def test_teacher_gets_no_gradient(self, rng, f64):
        student = init_segmenter(rng, depth=1, base=2, classes=3).leaves()
        teacher = init_segmenter(np.random.default_rng(9), depth=1, base=2, classes=3).leaves()
        x = rng.standard_normal((2, 1, 16, 16))
        with Tape():
            backward(consistency_loss(student, teacher, SpatialTransform.rotation([0.2, -0.3]), x))
        assert all(value.grad is None for value in teacher.values.values())
        assert sum(np.abs(g).sum() for g in student.grads().values()) > 0

class TestSmoothness:
    def test_constant_field_is_free(self):
        field = Tensor(np.full((1, 4, 4, 2), 0.3))
        assert float(smoothness_loss(field).data) == 0.0

    def test_rough_field_costs(self, rng):
        assert float(smoothness_loss(Tensor(rng.standard_normal((1, 4, 4, 2)))).data) > 0
