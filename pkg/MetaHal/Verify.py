"""Property suites run by `MetaHal.py verify`.

Each `suite_<name>` method records `Check`s; `run` dispatches on the suite
name and raises `VerificationError` listing every failed property.
"""
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import Errors
from . import Metrics
from . import Ops
from .GradCheck import grad_check
from .Losses import ScheduleConfig, consistency_loss, lr_schedule, ramp_weight
from .Nets import ParamSet, SpatialTransform, init_segmenter
from .Teacher import ema_init, ema_update
from .Tensor import Tensor, precision

@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool

    @property
    def margin(self):
        return self.threshold - self.value

    def line(self):
        return '{} {:<40} value={:.3e} threshold={:.1e} margin={:.3e}'.format(
            'PASS' if self.passed else 'FAIL', self.name, self.value, self.threshold, self.margin)

def reference_dice(pred, gt):
    p = set(zip(*np.nonzero(pred)))
    g = set(zip(*np.nonzero(gt)))
    if not p and not g:
        return 1.0
    return 2.0 * len(p & g) / (len(p) + len(g))

def _reference_boundary(mask):
    H, W = mask.shape
    points = []
    for y in range(H):
        for x in range(W):
            if not mask[y, x]:
                continue
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if not (0 <= ny < H and 0 <= nx < W) or not mask[ny, nx]:
                    points.append((y, x))
                    break
    return points

def reference_asd(pred, gt):
    a = _reference_boundary(pred)
    b = _reference_boundary(gt)
    total = 0.0
    for p in a:
        total += min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in b)
    for q in b:
        total += min(math.hypot(p[0] - q[0], p[1] - q[1]) for p in a)
    return total / (len(a) + len(b))

def reference_largest_component(label_map):
    """Flood fill per class; the first component found in scanline order wins ties."""
    H, W = label_map.shape
    out = label_map.copy()
    seen = np.zeros(label_map.shape, dtype=bool)
    components = {}
    for y in range(H):
        for x in range(W):
            cls = label_map[y, x]
            if cls == 0 or seen[y, x]:
                continue
            pixels = []
            todo = deque([(y, x)])
            seen[y, x] = True
            while todo:
                cy, cx = todo.popleft()
                pixels.append((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < H and 0 <= nx < W and not seen[ny, nx] and label_map[ny, nx] == cls:
                        seen[ny, nx] = True
                        todo.append((ny, nx))
            components.setdefault(cls, []).append(pixels)
    for cls, found in components.items():
        keep = max(range(len(found)), key=lambda i: (len(found[i]), -i))
        for index, pixels in enumerate(found):
            if index != keep:
                for py, px in pixels:
                    out[py, px] = 0
    return out

def _functional(out, rng):
    """Random linear functional, so every output element carries gradient."""
    return Ops.sum(Ops.mul(out, Tensor(rng.standard_normal(out.shape))))

def _away_from_zero(rng, shape, gap=0.1):
    values = rng.uniform(gap, 1.0, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)

def _grid_points(rng, shape, size):
    """Normalized coordinates whose pixel positions keep clear of the sampling lattice."""
    whole = rng.integers(-1, size, size=shape)
    pixel = whole + rng.uniform(0.1, 0.9, size=shape)
    return pixel * 2.0 / (size - 1) - 1.0

def _case_add(rng):
    return (lambda a, b: _functional(Ops.add(a, b), np.random.default_rng(0)),
            [rng.standard_normal((2, 3)), rng.standard_normal(3)])

def _case_sub(rng):
    return (lambda a, b: _functional(Ops.sub(a, b), np.random.default_rng(1)),
            [rng.standard_normal((3, 1)), rng.standard_normal((3, 4))])

def _case_mul(rng):
    return (lambda a, b: _functional(Ops.mul(a, b), np.random.default_rng(2)),
            [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))])

def _case_sum(rng):
    return lambda a: Ops.sum(Ops.mul(a, a)), [rng.standard_normal((3, 2))]

def _case_mean(rng):
    return (lambda a: _functional(Ops.mean(a, axis=1, keepdims=True), np.random.default_rng(3)),
            [rng.standard_normal((2, 3, 2))])

def _case_reshape(rng):
    return lambda a: _functional(Ops.reshape(a, (3, 4)), np.random.default_rng(4)), [rng.standard_normal((2, 6))]

def _case_transpose(rng):
    return (lambda a: _functional(Ops.transpose(a, (0, 2, 1)), np.random.default_rng(5)),
            [rng.standard_normal((2, 3, 4))])

def _case_getitem(rng):
    index = np.array([0, 2, 0, 1])
    return lambda a: _functional(Ops.getitem(a, index), np.random.default_rng(6)), [rng.standard_normal((3, 2))]

def _case_concat(rng):
    return (lambda a, b: _functional(Ops.concat([a, b], axis=1), np.random.default_rng(7)),
            [rng.standard_normal((2, 1, 3)), rng.standard_normal((2, 2, 3))])

def _case_relu(rng):
    return lambda a: _functional(Ops.relu(a), np.random.default_rng(8)), [_away_from_zero(rng, (3, 4))]

def _case_leaky_relu(rng):
    return lambda a: _functional(Ops.leaky_relu(a, 0.01), np.random.default_rng(9)), [_away_from_zero(rng, (3, 4))]

def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    return (lambda x, w, b: _functional(Ops.conv2d(x, w, b, stride=stride, padding=padding), np.random.default_rng(10)),
            [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)])

def _case_max_pool2d(rng):
    values = rng.permutation(32).reshape(1, 2, 4, 4) * 0.1 + rng.uniform(0, 0.01, size=(1, 2, 4, 4))
    return lambda x: _functional(Ops.max_pool2d(x), np.random.default_rng(11)), [values]

def _case_upsample_bilinear(rng):
    return lambda x: _functional(Ops.upsample_bilinear(x), np.random.default_rng(12)), [rng.standard_normal((1, 2, 3, 3))]

def _case_instance_norm(rng):
    return lambda x: _functional(Ops.instance_norm(x), np.random.default_rng(13)), [rng.standard_normal((2, 2, 3, 3))]

def _case_softmax(rng):
    return lambda x: _functional(Ops.softmax(x, axis=1), np.random.default_rng(14)), [rng.standard_normal((2, 3, 2, 2))]

def _case_mse(rng):
    weight = (rng.uniform(size=(2, 1, 3, 3)) > 0.3).astype(np.float64)
    return (lambda a, b: Ops.mse(a, b, weight=weight),
            [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 2, 3, 3))])

def _case_cross_entropy(rng):
    labels = rng.integers(0, 3, size=(2, 3, 3))
    return lambda x: Ops.cross_entropy(x, labels), [rng.standard_normal((2, 3, 3, 3))]

def _case_soft_dice(rng):
    return (lambda p, t: Ops.soft_dice(p, t),
            [rng.uniform(0.05, 1.0, size=(2, 3, 3, 3)), rng.uniform(0.05, 1.0, size=(2, 3, 3, 3))])

def _case_grid_sample(rng):
    grid = np.stack([_grid_points(rng, (1, 4, 4), 5), _grid_points(rng, (1, 4, 4), 5)], axis=-1)
    return lambda x, g: _functional(Ops.grid_sample(x, g), np.random.default_rng(15)), [rng.standard_normal((1, 2, 5, 5)), grid]

def _case_grid_sample_border(rng):
    grid = np.stack([_grid_points(rng, (1, 4, 4), 5), _grid_points(rng, (1, 4, 4), 5)], axis=-1)
    return (lambda x, g: _functional(Ops.grid_sample(x, g, padding='border'), np.random.default_rng(17)),
            [rng.standard_normal((1, 2, 5, 5)), grid])

def _case_affine_grid(rng):
    return lambda t: _functional(Ops.affine_grid(t, (4, 5)), np.random.default_rng(16)), [rng.standard_normal((2, 2, 3))]

GRAD_CASES = {
    'add': _case_add, 'sub': _case_sub, 'mul': _case_mul, 'sum': _case_sum, 'mean': _case_mean,
    'reshape': _case_reshape, 'transpose': _case_transpose, 'getitem': _case_getitem, 'concat': _case_concat,
    'relu': _case_relu, 'leaky_relu': _case_leaky_relu, 'conv2d': _case_conv2d, 'max_pool2d': _case_max_pool2d,
    'upsample_bilinear': _case_upsample_bilinear, 'instance_norm': _case_instance_norm, 'softmax': _case_softmax,
    'mse': _case_mse, 'cross_entropy': _case_cross_entropy, 'soft_dice': _case_soft_dice,
    'grid_sample': _case_grid_sample, 'grid_sample_border': _case_grid_sample_border,
    'affine_grid': _case_affine_grid,
}
LOOSE_GRAD_OPS = ('grid_sample', 'grid_sample_border', 'max_pool2d')

def random_mask(rng, size=32):
    """Blobby binary mask: thresholded smoothed noise, never empty."""
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(1.0, 3.0))
    mask = field > np.quantile(field, rng.uniform(0.5, 0.9))
    if not mask.any():
        mask[size // 2, size // 2] = True
    return mask

def random_label_map(rng, size=32, classes=5):
    field = ndimage.gaussian_filter(rng.standard_normal((classes, size, size)), sigma=(0, 1.5, 1.5))
    return np.argmax(field, axis=0).astype(np.uint8)

class Verifier:
    """Runs property suites and reports per-check margins through the logger."""
    SUITES = ('grad', 'metrics', 'schedules', 'ema', 'consistency')

    def __init__(self, logger, seed=0, instances=20, samples=100):
        self.logger = logger
        self.seed = seed
        self.instances = instances
        self.samples = samples
        self.checks = []

    def record(self, name, value, threshold, passed=None):
        passed = value < threshold if passed is None else passed
        check = Check(name, float(value), float(threshold), bool(passed))
        self.checks.append(check)
        (self.logger.info if check.passed else self.logger.warn)(check.line())
        return check

    def run(self, suite='all'):
        """Runs one suite (or all) and returns the checks; raises if any failed."""
        names = self.SUITES if suite == 'all' else (suite,)
        for name in names:
            method = getattr(self, 'suite_' + name, None)
            if method is None:
                raise Errors.ConfigError('Unknown verification suite', context={'suite': name,
                                                                             'choices': ', '.join(self.SUITES)})
            method()
        failures = ['{}: value {:.6g} exceeds {:.3g}'.format(c.name, c.value, c.threshold)
                    for c in self.checks if not c.passed]
        if failures:
            raise Errors.VerificationError(failures)
        return self.checks

    def suite_grad(self):
        rng = np.random.default_rng(self.seed)
        with precision(64):
            for name, case in GRAD_CASES.items():
                worst = 0.0
                for _ in range(self.instances):
                    closure, inputs = case(rng)
                    worst = max(worst, grad_check(closure, inputs))
                threshold = 1e-4 if name in LOOSE_GRAD_OPS else 1e-5
                self.record('grad.' + name, worst, threshold)

    def suite_metrics(self):
        rng = np.random.default_rng(self.seed)
        dice_err = asd_err = 0.0
        for _ in range(self.samples):
            a, b = random_mask(rng), random_mask(rng)
            dice_err = max(dice_err, abs(Metrics.dice(a, b) - reference_dice(a, b)))
            asd_err = max(asd_err, abs(Metrics.asd(a, b) - reference_asd(a, b)))
        self.record('metrics.dice_exact', dice_err, 0.0, passed=dice_err == 0.0)
        self.record('metrics.asd', asd_err, 1e-9)
        mismatches = 0
        for _ in range(self.samples):
            label_map = random_label_map(rng)
            if not np.array_equal(Metrics.largest_component(label_map), reference_largest_component(label_map)):
                mismatches += 1
        self.record('metrics.largest_component', mismatches, 0, passed=mismatches == 0)

    def suite_schedules(self):
        cfg = ScheduleConfig()
        end = ramp_weight(cfg.horizon, cfg)
        self.record('schedule.ramp_end', abs(end - cfg.ramp_max), 0.0, passed=end == cfg.ramp_max)
        self.record('schedule.ramp_start', abs(ramp_weight(0, cfg) - cfg.ramp_max * math.exp(-cfg.ramp_sharpness)), 1e-9)
        start = lr_schedule(0, cfg)
        peak = lr_schedule(cfg.warmup_epochs, cfg)
        self.record('schedule.lr_start', abs(start), 0.0, passed=start == 0.0)
        self.record('schedule.lr_peak', abs(peak - cfg.peak_lr), 0.0, passed=peak == cfg.peak_lr)
        err = max(abs(lr_schedule(t, cfg) - cfg.peak_lr * t / cfg.warmup_epochs)
                  for t in np.linspace(0, cfg.warmup_epochs, 61))
        self.record('schedule.lr_linear', err, 1e-12)

    def suite_ema(self):
        with precision(64):
            student = ParamSet('student', {'w': np.array([0.0])})
            frozen = ema_update(ema_init(ParamSet('s', {'w': np.array([1.0])}), beta=1.0), student)
            self.record('ema.beta_one_freezes', abs(frozen.params.array('w')[0] - 1.0), 1e-12)
            copied = ema_update(ema_init(ParamSet('s', {'w': np.array([1.0])}), beta=0.0), student)
            self.record('ema.beta_zero_copies', abs(copied.params.array('w')[0]), 1e-12)
            beta = 0.99
            state = ema_init(ParamSet('s', {'w': np.array([1.0])}), beta=beta)
            err = 0.0
            for step in range(1, 51):
                state = ema_update(state, student)
                err = max(err, abs(state.params.array('w')[0] - beta ** step))
            self.record('ema.geometric', err, 1e-12)

    def suite_consistency(self):
        rng = np.random.default_rng(self.seed)
        with precision(64):
            params = init_segmenter(rng, depth=1, base=2, classes=3)
            teacher = params.copy()
            x = rng.standard_normal((2, 1, 8, 8))
            value = float(consistency_loss(params, teacher, SpatialTransform.identity(2), x).data)
            flat = np.full((2, 1, 64, 64), 0.7)
            region = np.zeros((64, 64))
            region[16:48, 16:48] = 1.0
            rotation = SpatialTransform.rotation(rng.uniform(-0.1, 0.1, size=2))
            constant = float(consistency_loss(params, teacher, rotation, flat, region=region).data)
        self.record('consistency.null_case', value, 1e-10)
        self.record('consistency.constant_field', constant, 1e-6)
