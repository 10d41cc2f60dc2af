import math
from dataclasses import dataclass

import numpy as np

from . import Errors
from . import Ops
from .Nets import segment, warp
from .Tensor import Tensor, no_grad

@dataclass
class LossWeights:
    lambda_trans: float = 0.0
    lambda_con: float = 0.0

    def __post_init__(self):
        for name in ('lambda_trans', 'lambda_con'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise Errors.ConfigError('Loss weights must be finite and nonnegative', context={name: value})

@dataclass
class ScheduleConfig:
    ramp_max: float = 10.0
    ramp_sharpness: float = 5.0
    horizon: int = 150
    warmup_epochs: int = 30
    peak_lr: float = 0.005
    inner_lr: float = 0.001

    def __post_init__(self):
        if self.horizon <= 0:
            raise Errors.ConfigError('Schedule horizon must be positive', context={'horizon': self.horizon})
        if not 0 <= self.warmup_epochs <= self.horizon:
            raise Errors.ConfigError('warmup_epochs must lie in [0, horizon]',
                                     context={'warmup_epochs': self.warmup_epochs, 'horizon': self.horizon})

@dataclass
class NoiseConfig:
    """Additive Gaussian input perturbation, drawn independently per branch."""
    sigma: float = 0.05

def seg_loss(logits, labels):
    """Cross entropy plus (1 - mean soft Dice over the foreground classes)."""
    labels = np.asarray(labels)
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise Errors.LabelError('Label values must lie in [0, {})'.format(classes),
                                context={'min': int(labels.min()), 'max': int(labels.max())})
    ce = Ops.cross_entropy(logits, labels)
    probs = Ops.softmax(logits, axis=1)
    dice = Ops.soft_dice(probs, Ops.one_hot(labels, classes, logits.data.dtype))
    return ce + (1.0 - dice)

def trans_loss(moved, fixed):
    return Ops.mse(moved, fixed)

def smoothness_loss(field):
    """Squared spatial finite differences of a [B,H,W,2] displacement field."""
    dy = Ops.mse(field[:, 1:], field[:, :-1])
    dx = Ops.mse(field[:, :, 1:], field[:, :, :-1])
    return dy + dx

def _perturb(images, sigma, rng):
    if rng is None or sigma <= 0:
        return images
    return images + Tensor(rng.normal(0.0, sigma, size=images.shape))

def validity_mask(transform, shape):
    """1 where bilinear sampling stays fully inside the image, 0 where padding leaks in."""
    with no_grad():
        ones = Tensor(np.ones((shape[0], 1) + tuple(shape[2:])))
        coverage = warp(ones, transform.detach()).data
    return (coverage > 1.0 - 1e-6).astype(coverage.dtype)

def consistency_loss(student_params, teacher_params, transform, x, noise_cfg=None, rng=None, region=None):
    """MSE between warp(teacher probs) and student probs of the warped input.

    Teacher predictions are constants; the transform keeps its gradient path
    on both branches. The student input is warped with border padding and
    teacher regions padded in by the warp are masked out. `transform=None`
    is the plain mean-teacher case: no warping on either branch. `region`,
    an optional weight map broadcastable to [B,1,H,W], further restricts the
    pixels compared.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    sigma = noise_cfg.sigma if noise_cfg is not None else 0.0
    teacher_noise = _perturb(x.detach(), sigma, rng)
    with no_grad():
        teacher_probs = Ops.softmax(segment(teacher_params, teacher_noise), axis=1).detach()
    weight = None if region is None else np.broadcast_to(np.asarray(region), (x.shape[0], 1) + x.shape[2:])
    if transform is None:
        student_probs = Ops.softmax(segment(student_params, _perturb(x, sigma, rng)), axis=1)
        return Ops.mse(student_probs, teacher_probs, weight=weight)
    target = warp(teacher_probs, transform)
    student_in = _perturb(warp(x, transform, padding='border'), sigma, rng)
    student_probs = Ops.softmax(segment(student_params, student_in), axis=1)
    mask = validity_mask(transform, x.shape)
    return Ops.mse(student_probs, target, weight=mask if weight is None else mask * weight)

def ramp_weight(t, cfg):
    """ramp_max * exp(-sharpness * (1 - t/T)^2), with t clamped to [0, T]."""
    t = min(max(float(t), 0.0), float(cfg.horizon))
    return cfg.ramp_max * math.exp(-cfg.ramp_sharpness * (1.0 - t / cfg.horizon) ** 2)

def lr_schedule(epoch, cfg):
    """Linear warmup from 0 to peak_lr over warmup_epochs, then constant."""
    if cfg.warmup_epochs == 0 or epoch >= cfg.warmup_epochs:
        return cfg.peak_lr
    return cfg.peak_lr * max(float(epoch), 0.0) / cfg.warmup_epochs

def weights_at(t, cfg):
    """Consistency and transformation weights, ramped independently on the same curve."""
    return LossWeights(lambda_trans=ramp_weight(t, cfg), lambda_con=ramp_weight(t, cfg))
