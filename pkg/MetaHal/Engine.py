"""Episodic meta-learning trainer.

An episode splits sampled (moving source, fixed source-like target) pairs
into meta-train and meta-test halves. The inner step adapts the segmenter
and hallucinator on meta-train; the meta-test loss is evaluated with the
adapted parameters and both gradients are applied to the original
parameters in one Adam step. Ablation modes switch individual loss terms
off; `Counters` records which terms actually ran.
"""
import csv
import json
import math
import os
import queue
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from tqdm import tqdm

from . import Errors
from . import Ops
from . import SynthData
from .Losses import (NoiseConfig, ScheduleConfig, consistency_loss, lr_schedule, ramp_weight,
                     seg_loss, smoothness_loss, trans_loss, weights_at)
from .Metrics import evaluate
from .Nets import (SpatialTransform, hallucinate, init_hallucinator, init_segmenter, load_checkpoint,
                   save_checkpoint, segment, warp, warp_labels)
from .Optim import Adam
from .Teacher import TeacherState, ema_init, ema_update
from .Tensor import Tape, Tensor, backward, get_precision, no_grad

MODES = ('no_adapt', 'mt', 'meta_seg', 'meta_hal', 'full', 'supervised_only')

@dataclass(frozen=True)
class ModeTerms:
    episodic: bool
    hallucinator: bool
    consistency: bool
    warped_consistency: bool
    target: bool

MODE_TERMS = {
    'no_adapt': ModeTerms(False, False, False, False, False),
    'supervised_only': ModeTerms(False, False, False, False, False),
    'mt': ModeTerms(False, False, True, False, True),
    'meta_seg': ModeTerms(True, False, True, False, True),
    'meta_hal': ModeTerms(True, True, True, False, True),
    'full': ModeTerms(True, True, True, True, True),
}

@dataclass
class TrainerConfig:
    mode: str = 'full'
    epochs: int = 150
    n_train_pairs: int = 16
    n_test_pairs: int = 8
    labeled_batch: int = 8
    augmented_batch: int = 8
    unlabeled_batch: int = 16
    ema_beta: float = 0.99
    second_order: bool = False
    hvp_eps: float = 1e-3
    seed: int = 0
    depth: int = 3
    base_channels: int = 16
    transform_kind: str = 'affine'
    smoothness_weight: float = 0.01
    noise_sigma: float = 0.05
    rotation_degrees: float = 10.0
    checkpoint_every: int = 10
    divergence_threshold: float = 1e4
    eval_batch: int = 16
    val_every: int = 1
    prefetch: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if self.mode not in MODES:
            raise Errors.ConfigError('Unknown ablation mode', context={'mode': self.mode, 'choices': ', '.join(MODES)})
        if self.transform_kind not in (SpatialTransform.AFFINE, SpatialTransform.DENSE):
            raise Errors.ConfigError('Unknown transform kind', context={'transform_kind': self.transform_kind})
        for name in ('epochs', 'n_train_pairs', 'n_test_pairs', 'labeled_batch', 'unlabeled_batch',
                     'depth', 'base_channels', 'eval_batch', 'checkpoint_every', 'val_every'):
            if getattr(self, name) < 1:
                raise Errors.ConfigError('{} must be at least 1'.format(name), context={name: getattr(self, name)})
        if not 0 <= self.augmented_batch <= self.n_train_pairs:
            raise Errors.ConfigError('augmented_batch must lie in [0, n_train_pairs]',
                                     context={'augmented_batch': self.augmented_batch,
                                              'n_train_pairs': self.n_train_pairs})
        if self.hvp_eps <= 0:
            raise Errors.ConfigError('hvp_eps must be positive', context={'hvp_eps': self.hvp_eps})
        if self.prefetch < 0:
            raise Errors.ConfigError('prefetch must be nonnegative', context={'prefetch': self.prefetch})

    @property
    def terms(self):
        return MODE_TERMS[self.mode]

class Counters(Counter):
    """How many times each loss term / transform construction ran."""
    def hit(self, name, target=False):
        self[name] += 1
        if target:
            self['target_losses'] += 1

@dataclass
class TrainingData:
    """Arrays the trainer draws from; images stay in [0,1] until batched."""
    labeled: SynthData.DomainDataset
    fixed: Optional[SynthData.DomainDataset]
    unlabeled: Optional[SynthData.DomainDataset]
    test: SynthData.DomainDataset
    test_labels: np.ndarray

@dataclass
class Pairs:
    moving: np.ndarray
    labels: np.ndarray
    fixed: Optional[np.ndarray]
    moving_ids: np.ndarray
    fixed_ids: np.ndarray

    def __len__(self):
        return len(self.moving)

@dataclass
class Episode:
    train: Pairs
    test: Pairs
    labeled_images: np.ndarray
    labeled_labels: np.ndarray
    labeled_ids: np.ndarray
    unlabeled_images: np.ndarray
    unlabeled_ids: np.ndarray

def _draw(rng, pool, count):
    """Uniform indices; with replacement only when the pool is smaller than the batch."""
    return rng.choice(pool, size=count, replace=pool < count)

def _split_fixed(rng, pool, n_train, n_test):
    """Disjoint meta-train / meta-test index sets over the fixed-image pool."""
    order = rng.permutation(pool)
    if pool >= n_train + n_test:
        return order[:n_train], order[n_train:n_train + n_test]
    if pool < 2:
        raise Errors.ConfigError('At least two fixed images are needed for disjoint meta-train/meta-test pairs',
                                 context={'pool': pool})
    cut = min(max(1, int(round(pool * n_train / (n_train + n_test)))), pool - 1)
    train = rng.choice(order[:cut], size=n_train, replace=True)
    test = rng.choice(order[cut:], size=n_test, replace=True)
    return train, test

def rotate_batch(images, labels, rng, degrees):
    """Random in-plane rotation per item, uniform in +-degrees; labels use nearest sampling."""
    images = np.asarray(images)
    if degrees <= 0 or not len(images):
        return images, labels
    angles = np.deg2rad(rng.uniform(-degrees, degrees, size=len(images)))
    transform = SpatialTransform.rotation(angles)
    with no_grad():
        rotated = warp(Tensor(images), transform).data.astype(images.dtype)
    if labels is None:
        return rotated, None
    return rotated, warp_labels(labels, transform).astype(np.uint8)

def _pairs(data, rng, moving_ids, fixed_ids, degrees):
    moving, labels = rotate_batch(data.labeled.images[moving_ids], data.labeled.labels[moving_ids], rng, degrees)
    fixed = SynthData.zscore(data.fixed.images[fixed_ids]) if len(fixed_ids) else None
    return Pairs(SynthData.zscore(moving), labels, fixed, moving_ids, fixed_ids)

def sample_episode(data, cfg, rng, unlabeled_ids=None):
    """Draws one episode; fixed-image index sets of the two halves never overlap."""
    k = len(data.labeled)
    if k == 0 or not data.labeled.has_labels:
        raise Errors.ConfigError('The labeled set is empty')
    needs_target = cfg.terms.target
    if needs_target and (data.fixed is None or not len(data.fixed) or data.unlabeled is None
                         or not len(data.unlabeled)):
        raise Errors.ConfigError('Mode {} needs unlabeled target images'.format(cfg.mode))
    if data.fixed is not None and len(data.fixed):
        train_fixed, test_fixed = _split_fixed(rng, len(data.fixed), cfg.n_train_pairs, cfg.n_test_pairs)
    else:
        train_fixed = test_fixed = np.zeros(0, dtype=np.int64)
    train_moving = _draw(rng, k, cfg.n_train_pairs)
    test_moving = _draw(rng, k, cfg.n_test_pairs)
    labeled_ids = _draw(rng, k, cfg.labeled_batch)
    degrees = cfg.rotation_degrees
    train = _pairs(data, rng, train_moving, train_fixed, degrees)
    test = _pairs(data, rng, test_moving, test_fixed, degrees)
    labeled, labels = rotate_batch(data.labeled.images[labeled_ids], data.labeled.labels[labeled_ids], rng, degrees)
    if needs_target:
        if unlabeled_ids is None:
            unlabeled_ids = _draw(rng, len(data.unlabeled), cfg.unlabeled_batch)
        unlabeled = SynthData.zscore(data.unlabeled.images[unlabeled_ids])
    else:
        unlabeled_ids = np.zeros(0, dtype=np.int64)
        unlabeled = np.zeros((0,) + data.labeled.images.shape[1:], dtype=data.labeled.images.dtype)
    return Episode(train, test, SynthData.zscore(labeled), labels, labeled_ids, unlabeled, np.asarray(unlabeled_ids))

def _check_finite(loss, stage, snapshot=None):
    value = float(loss.data)
    if not math.isfinite(value):
        context = {'stage': stage, 'loss': value}
        context.update(snapshot or {})
        raise Errors.NumericalError('Non-finite loss', context=context)
    return value

def _pair_terms(seg, hal, pairs, cfg, counters, extra_images=None, extra_labels=None):
    """L_seg over extra labeled items plus moving images (warped by the hallucinator when active).

    Returns (l_seg, l_trans or None, transform or None).
    """
    terms = cfg.terms
    aug = min(cfg.augmented_batch, len(pairs))
    transform = l_trans = None
    if terms.hallucinator:
        transform, moved = hallucinate(hal, pairs.moving, pairs.fixed)
        counters.hit('hallucinate')
        l_trans = trans_loss(moved, Tensor(pairs.fixed))
        counters.hit('trans_loss', target=True)
        if transform.kind == SpatialTransform.DENSE and cfg.smoothness_weight > 0:
            l_trans = l_trans + cfg.smoothness_weight * smoothness_loss(transform.params)
        augmented = Ops.getitem(moved, slice(0, aug))
        aug_labels = warp_labels(pairs.labels[:aug], transform.detach().select(np.arange(aug)))
    else:
        augmented = Tensor(pairs.moving[:aug])
        aug_labels = pairs.labels[:aug]
    images, labels = [augmented], [aug_labels]
    if extra_images is not None and len(extra_images):
        images.insert(0, Tensor(extra_images))
        labels.insert(0, extra_labels)
    batch = Ops.concat(images, axis=0) if len(images) > 1 else images[0]
    l_seg = seg_loss(segment(seg, batch), np.concatenate(labels))
    counters.hit('seg_loss')
    return l_seg, l_trans, transform

@dataclass
class InnerResult:
    seg: object
    hal: object
    loss: float
    parts: dict
    seg_grads: dict
    hal_grads: Optional[dict]

def meta_train_loss(seg, hal, episode, weights, cfg, counters):
    """L_seg(labeled + augmented) + lambda_trans * L_trans(train pairs)."""
    l_seg, l_trans, _ = _pair_terms(seg, hal, episode.train, cfg, counters,
                                    episode.labeled_images, episode.labeled_labels)
    loss = l_seg
    parts = {'L_seg': float(l_seg.data)}
    if l_trans is not None:
        loss = loss + weights.lambda_trans * l_trans
        parts['L_trans'] = float(l_trans.data)
    return loss, parts

def _meta_train_grads(seg, hal, episode, weights, cfg, counters):
    seg_leaves = seg.leaves()
    hal_leaves = hal.leaves() if hal is not None and cfg.terms.hallucinator else None
    with Tape():
        loss, parts = meta_train_loss(seg_leaves, hal_leaves if hal_leaves is not None else hal,
                                      episode, weights, cfg, counters)
        value = _check_finite(loss, 'meta-train', parts)
        backward(loss)
    return value, parts, seg_leaves.grads(), (hal_leaves.grads() if hal_leaves is not None else None)

def inner_update(seg, hal, episode, alpha, weights, cfg, counters=None):
    """One gradient step of the meta-train loss: (seg', hal') = (seg, hal) - alpha * grad."""
    if alpha < 0:
        raise Errors.ConfigError('Inner learning rate must be nonnegative', context={'alpha': alpha})
    counters = counters if counters is not None else Counters()
    value, parts, seg_grads, hal_grads = _meta_train_grads(seg, hal, episode, weights, cfg, counters)
    seg_adapted = seg.updated(seg_grads, alpha)
    hal_adapted = hal.updated(hal_grads, alpha) if hal_grads is not None else hal
    return InnerResult(seg_adapted, hal_adapted, value, parts, seg_grads, hal_grads)

def meta_test_loss(seg, hal, teacher, episode, weights, cfg, counters, rng=None):
    """L_seg + lambda_con * L_con + lambda_trans * L_trans on the meta-test half."""
    terms = cfg.terms
    pairs = episode.test
    l_seg, l_trans, transform = _pair_terms(seg, hal, pairs, cfg, counters, pairs.moving, pairs.labels)
    loss = l_seg
    parts = {'L_seg': float(l_seg.data)}
    if l_trans is not None:
        loss = loss + weights.lambda_trans * l_trans
        parts['L_trans'] = float(l_trans.data)
    if terms.consistency:
        x = np.concatenate([pairs.moving, episode.unlabeled_images])
        if terms.warped_consistency:
            indices = np.arange(len(x)) % transform.batch
            item_transform = transform.select(indices)
            counters.hit('warped_consistency')
        else:
            item_transform = None
        l_con = consistency_loss(seg, teacher.params, item_transform, x, NoiseConfig(cfg.noise_sigma), rng)
        counters.hit('con_loss', target=True)
        loss = loss + weights.lambda_con * l_con
        parts['L_con'] = float(l_con.data)
    return loss, parts

def meta_test_eval(seg, hal, teacher, episode, weights, cfg, counters=None, rng=None):
    """Value of the meta-test loss (no gradients)."""
    counters = counters if counters is not None else Counters()
    with no_grad():
        loss, _ = meta_test_loss(seg, hal, teacher, episode, weights, cfg, counters, rng)
    return _check_finite(loss, 'meta-test')

def _flat_norm(*grad_sets):
    total = 0.0
    for grads in grad_sets:
        if grads:
            total += sum(float(np.sum(np.square(g))) for g in grads.values())
    return math.sqrt(total)

def _hessian_correction(seg, hal, episode, weights, cfg, seg_vec, hal_vec):
    """H_train @ v by a central difference of meta-train gradients."""
    norm = _flat_norm(seg_vec, hal_vec)
    if norm == 0.0:
        return ({k: np.zeros_like(v) for k, v in seg_vec.items()},
                {k: np.zeros_like(v) for k, v in hal_vec.items()} if hal_vec is not None else None)
    eps = cfg.hvp_eps / norm
    scratch = Counters()
    plus = _meta_train_grads(seg.updated(seg_vec, -eps), hal.updated(hal_vec, -eps) if hal_vec is not None else hal,
                             episode, weights, cfg, scratch)
    minus = _meta_train_grads(seg.updated(seg_vec, eps), hal.updated(hal_vec, eps) if hal_vec is not None else hal,
                              episode, weights, cfg, scratch)
    seg_hvp = {k: (plus[2][k] - minus[2][k]) / (2 * eps) for k in seg_vec}
    hal_hvp = {k: (plus[3][k] - minus[3][k]) / (2 * eps) for k in hal_vec} if hal_vec is not None else None
    return seg_hvp, hal_hvp

@dataclass
class StepResult:
    seg: object
    hal: object
    meta_train: float
    meta_test: float
    parts: dict

def meta_gradients(seg, hal, teacher, episode, weights, alpha, cfg, counters, rng=None):
    """Gradients of L_meta_train(seg, hal) + L_meta_test(seg', hal') w.r.t. the original parameters."""
    inner = inner_update(seg, hal, episode, alpha, weights, cfg, counters)
    seg_adapted = inner.seg.leaves()
    hal_adapted = inner.hal.leaves() if inner.hal_grads is not None else inner.hal
    with Tape():
        loss, parts = meta_test_loss(seg_adapted, hal_adapted, teacher, episode, weights, cfg, counters, rng)
        test_value = _check_finite(loss, 'meta-test', parts)
        backward(loss)
    seg_test = seg_adapted.grads()
    hal_test = hal_adapted.grads() if inner.hal_grads is not None else None
    if cfg.second_order:
        seg_hvp, hal_hvp = _hessian_correction(seg, hal, episode, weights, cfg, seg_test, hal_test)
        seg_test = {k: seg_test[k] - alpha * seg_hvp[k] for k in seg_test}
        if hal_test is not None:
            hal_test = {k: hal_test[k] - alpha * hal_hvp[k] for k in hal_test}
    seg_total = {k: inner.seg_grads[k] + seg_test[k] for k in seg_test}
    hal_total = {k: inner.hal_grads[k] + hal_test[k] for k in hal_test} if hal_test is not None else None
    summary = {'L_meta_train': inner.loss, 'L_meta_test': test_value}
    for name, value in parts.items():
        summary[name] = value
    for name, value in inner.parts.items():
        summary.setdefault(name, value)
    return seg_total, hal_total, summary

def _guard(summary, threshold, context):
    total = summary.get('L_meta_train', 0.0) + summary.get('L_meta_test', 0.0)
    if not math.isfinite(total) or total > threshold:
        snapshot = dict(context)
        snapshot.update({k: '{:.6g}'.format(v) for k, v in summary.items()})
        raise Errors.NumericalError('Training diverged (loss {:.6g} > {:g})'.format(total, threshold),
                                    context=snapshot)

def meta_step(seg, hal, teacher, episode, t, cfg, optimizer, counters=None, rng=None):
    """One Adam step on the combined meta objective at schedule time `t` (epochs)."""
    counters = counters if counters is not None else Counters()
    weights = weights_at(t, cfg.schedule)
    seg_grads, hal_grads, summary = meta_gradients(seg, hal, teacher, episode, weights,
                                                   cfg.schedule.inner_lr, cfg, counters, rng)
    _guard(summary, cfg.divergence_threshold, {'t': t})
    lr = lr_schedule(t, cfg.schedule)
    seg_new = optimizer.step(seg, seg_grads, lr)
    hal_new = optimizer.step(hal, hal_grads, lr) if hal_grads is not None else hal
    return StepResult(seg_new, hal_new, summary['L_meta_train'], summary['L_meta_test'], summary)

def plain_step(seg, teacher, episode, t, cfg, optimizer, counters=None, rng=None):
    """Non-episodic step: supervised L_seg, plus noise consistency in mt mode."""
    counters = counters if counters is not None else Counters()
    weights = weights_at(t, cfg.schedule)
    leaves = seg.leaves()
    with Tape():
        l_seg, _, _ = _pair_terms(leaves, None, episode.train, cfg, counters,
                                  episode.labeled_images, episode.labeled_labels)
        loss = l_seg
        summary = {'L_seg': float(l_seg.data)}
        if cfg.terms.consistency:
            x = np.concatenate([episode.labeled_images, episode.unlabeled_images])
            l_con = consistency_loss(leaves, teacher.params, None, x, NoiseConfig(cfg.noise_sigma), rng)
            counters.hit('con_loss', target=True)
            loss = loss + weights.lambda_con * l_con
            summary['L_con'] = float(l_con.data)
        summary['L_meta_train'] = _check_finite(loss, 'train', summary)
        backward(loss)
    _guard(summary, cfg.divergence_threshold, {'t': t})
    seg_new = optimizer.step(seg, leaves.grads(), lr_schedule(t, cfg.schedule))
    return StepResult(seg_new, None, summary['L_meta_train'], 0.0, summary)

def fit_registration(hal, moving, fixed, steps=500, lr=0.005, optimizer=None):
    """Trains the hallucinator alone on L_trans for a fixed set of pairs."""
    optimizer = optimizer or Adam()
    moving = Tensor(moving)
    fixed = Tensor(fixed)
    losses = []
    for _ in range(steps):
        leaves = hal.leaves()
        with Tape():
            transform, moved = hallucinate(leaves, moving, fixed)
            loss = trans_loss(moved, fixed)
            if transform.kind == SpatialTransform.DENSE:
                loss = loss + 0.01 * smoothness_loss(transform.params)
            losses.append(_check_finite(loss, 'registration'))
            backward(loss)
        hal = optimizer.step(hal, leaves.grads(), lr)
    return hal, losses

@dataclass
class Benchmark:
    source_all: SynthData.DomainDataset
    source_labeled: SynthData.DomainDataset
    source_unlabeled: SynthData.DomainDataset
    target: SynthData.DomainDataset
    source_like: SynthData.DomainDataset
    target_labels: np.ndarray
    n_target_test: int

BENCHMARK_FILES = {
    'source_all': 'source_all.mhal',
    'source_labeled': 'source_labeled.mhal',
    'source_unlabeled': 'source_unlabeled.mhal',
    'target': 'target.mhal',
    'source_like': 'source_like.mhal',
    'target_gt': 'target_gt.mhal',
}

def write_benchmark(cfg, seed, out_dir):
    """Generates and saves every dataset of the synthetic benchmark; returns the counts."""
    os.makedirs(out_dir, exist_ok=True)
    source, target, target_labels = SynthData.generate(cfg, np.random.default_rng(seed))
    labeled, unlabeled = SynthData.few_shot_split(source, cfg.shots, seed)
    source_like = SynthData.make_source_like(target, cfg)
    meta = {'seed': seed, 'shots': cfg.shots, 'n_target': cfg.n_target, 'n_target_test': cfg.n_target_test,
            'synth': asdict(cfg)}
    sets = {'source_all': source, 'source_labeled': labeled, 'source_unlabeled': unlabeled, 'target': target,
            'source_like': source_like, 'target_gt': target.with_labels(target_labels)}
    counts = {}
    for name, dataset in sets.items():
        SynthData.save(dataset, os.path.join(out_dir, BENCHMARK_FILES[name]), meta=meta)
        counts[name] = len(dataset)
    return counts

def load_benchmark(data_dir):
    sets = {name: SynthData.load(os.path.join(data_dir, file)) for name, file in BENCHMARK_FILES.items()}
    try:
        with open(os.path.join(data_dir, BENCHMARK_FILES['target'] + '.json')) as f:
            n_test = int(json.load(f)['n_target_test'])
    except (OSError, KeyError, ValueError) as ex:
        raise Errors.DatasetFormatError('Missing or corrupted benchmark sidecar: {}'.format(ex),
                                        context={'dir': data_dir})
    return Benchmark(sets['source_all'], sets['source_labeled'], sets['source_unlabeled'], sets['target'],
                     sets['source_like'], sets['target_gt'].labels, n_test)

def training_data(bench, mode, split_seed=None):
    """Per-mode datasets: adapting modes see source-like target, the bounds see raw target.

    With `split_seed` the few-shot labeled subset is redrawn from the full source pool.
    """
    source_labeled, source_unlabeled = bench.source_labeled, bench.source_unlabeled
    if split_seed is not None:
        source_labeled, source_unlabeled = SynthData.few_shot_split(bench.source_all, len(source_labeled), split_seed)
    n = len(bench.target)
    split = n - bench.n_target_test
    if split < 0:
        raise Errors.DatasetFormatError('Target set is smaller than its test split',
                                        context={'target': n, 'test': bench.n_target_test})
    train_ids, test_ids = np.arange(split), np.arange(split, n)
    test_labels = bench.target_labels[test_ids]
    if mode in ('no_adapt', 'supervised_only'):
        test = bench.target.subset(test_ids)
        if mode == 'supervised_only':
            labeled = bench.target.subset(train_ids).with_labels(bench.target_labels[train_ids])
        else:
            labeled = source_labeled
        return TrainingData(labeled, None, None, test, test_labels)
    fixed = bench.source_like.subset(train_ids)
    pool = np.concatenate([fixed.images, source_unlabeled.images])
    subjects = np.concatenate([fixed.subjects, source_unlabeled.subjects])
    unlabeled = SynthData.DomainDataset(pool, None, 'source_like', subjects)
    return TrainingData(source_labeled, fixed, unlabeled, bench.source_like.subset(test_ids), test_labels)

class EpisodeStream:
    """Episodes of one epoch, optionally sampled ahead on a worker thread.

    The worker owns the sampling generator until the epoch is drained, so
    the episode sequence is the same with and without prefetching. Closing
    the stream early stops the worker and discards what it sampled.
    """
    def __init__(self, data, cfg, rng, chunks, prefetch=0):
        self.data = data
        self.cfg = cfg
        self.rng = rng
        self.chunks = chunks
        self.prefetch = prefetch
        self.worker = None
        self._stop = threading.Event()
        self._out = None

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._out.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self):
        try:
            for chunk in self.chunks:
                if not self._put(sample_episode(self.data, self.cfg, self.rng, chunk)):
                    return
        except Exception as ex:
            self._put(ex)
        self._put(None)

    def __iter__(self):
        if not self.prefetch:
            for chunk in self.chunks:
                yield sample_episode(self.data, self.cfg, self.rng, chunk)
            return
        self._out = queue.Queue(maxsize=self.prefetch)
        self.worker = threading.Thread(target=self._produce, daemon=True)
        self.worker.start()
        try:
            while True:
                item = self._out.get()
                if item is None:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self):
        self._stop.set()
        if self.worker is None:
            return
        while self.worker.is_alive():
            try:
                self._out.get(timeout=0.05)
            except queue.Empty:
                pass
        self.worker.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

LOG_FIELDS = ('epoch', 'L_seg', 'L_trans', 'L_con', 'L_meta_train', 'L_meta_test',
              'lambda_con', 'lambda_trans', 'lr', 'val_dice')

class Trainer:
    """Owns parameters, optimizer state and the run directory of one training run."""
    def __init__(self, cfg, data, run_dir, logger, progress=False):
        self.cfg = cfg
        self.data = data
        self.run_dir = run_dir
        self.logger = logger
        self.progress = progress
        self.counters = Counters()
        root = np.random.default_rng(cfg.seed)
        init_rng, self.sample_rng, self.noise_rng = root.spawn(3)
        self.seg = init_segmenter(init_rng, depth=cfg.depth, base=cfg.base_channels, classes=SynthData.NUM_CLASSES)
        self.hal = init_hallucinator(init_rng, kind=cfg.transform_kind) if cfg.terms.hallucinator else None
        self.teacher = ema_init(self.seg, cfg.ema_beta)
        self.optimizer = Adam()
        self.epoch = 0

    @property
    def checkpoint_dir(self):
        return os.path.join(self.run_dir, 'checkpoints')

    def _chunks(self):
        if self.cfg.terms.target:
            order = self.sample_rng.permutation(len(self.data.unlabeled))
            size = self.cfg.unlabeled_batch
        else:
            order = self.sample_rng.permutation(len(self.data.labeled))
            size = self.cfg.labeled_batch
        return [order[i:i + size] for i in range(0, len(order), size)]

    def run_epoch(self, epoch):
        """Trains one epoch and returns its log row (episode means)."""
        chunks = self._chunks()
        totals = Counter()
        seen = Counter()
        with EpisodeStream(self.data, self.cfg, self.sample_rng, chunks, self.cfg.prefetch) as stream:
            for index, episode in enumerate(stream):
                t = epoch - 1 + (index + 1) / len(chunks)
                try:
                    if self.cfg.terms.episodic:
                        result = meta_step(self.seg, self.hal, self.teacher, episode, t, self.cfg, self.optimizer,
                                           self.counters, self.noise_rng)
                        self.hal = result.hal
                    else:
                        result = plain_step(self.seg, self.teacher, episode, t, self.cfg, self.optimizer,
                                            self.counters, self.noise_rng)
                except Errors.NumericalError as ex:
                    ex.context.update({'epoch': epoch, 'episode': index})
                    raise
                self.seg = result.seg
                self.teacher = ema_update(self.teacher, self.seg)
                for name, value in result.parts.items():
                    totals[name] += value
                    seen[name] += 1
                self.logger.debug('epoch {} episode {}:'.format(epoch, index),
                                  ' '.join('{}={:.5f}'.format(k, v) for k, v in sorted(result.parts.items())))
        row = {'epoch': epoch}
        for name in LOG_FIELDS[1:6]:
            row[name] = totals[name] / seen[name] if seen[name] else ''
        row['lambda_con'] = row['lambda_trans'] = ramp_weight(epoch, self.cfg.schedule)
        row['lr'] = lr_schedule(epoch, self.cfg.schedule)
        row['val_dice'] = ''
        if epoch % self.cfg.val_every == 0 or epoch == self.cfg.epochs:
            row['val_dice'] = self.evaluate('student').mean_dice
        return row

    def evaluate(self, model='student'):
        params = self.seg if model == 'student' else self.teacher.params
        return evaluate(params, model, self.data.test, self.data.test_labels, self.cfg.eval_batch)

    def save(self, tag):
        path = os.path.join(self.checkpoint_dir, tag)
        os.makedirs(path, exist_ok=True)
        save_checkpoint(self.seg, os.path.join(path, 'student.ckpt'))
        save_checkpoint(self.teacher.params, os.path.join(path, 'teacher.ckpt'))
        if self.hal is not None:
            save_checkpoint(self.hal, os.path.join(path, 'hallucinator.ckpt'))
        sets, steps = self.optimizer.state()
        for name, params in sets.items():
            save_checkpoint(params, os.path.join(path, name + '.ckpt'))
        state = {
            'epoch': self.epoch,
            'mode': self.cfg.mode,
            'precision': get_precision(),
            'teacher_beta': self.teacher.beta,
            'teacher_steps': self.teacher.step_count,
            'adam_steps': steps,
            'adam_sets': sorted(sets),
            'sample_rng': self.sample_rng.bit_generator.state,
            'noise_rng': self.noise_rng.bit_generator.state,
            'counters': dict(self.counters),
        }
        with open(os.path.join(path, 'state.json'), 'w') as f:
            json.dump(state, f, indent=2, sort_keys=True)
        self.logger.info('Saved checkpoint', path)
        return path

    def load(self, path):
        try:
            with open(os.path.join(path, 'state.json')) as f:
                state = json.load(f)
        except (OSError, ValueError) as ex:
            raise Errors.CheckpointError('Cannot read run state: {}'.format(ex), context={'path': path})
        if state.get('mode') != self.cfg.mode:
            raise Errors.CheckpointError('Checkpoint was written by a different mode',
                                         context={'checkpoint': state.get('mode'), 'config': self.cfg.mode})
        self.seg = load_checkpoint(os.path.join(path, 'student.ckpt'))
        self.teacher = TeacherState(load_checkpoint(os.path.join(path, 'teacher.ckpt')),
                                    state['teacher_beta'], state['teacher_steps'])
        if self.hal is not None:
            self.hal = load_checkpoint(os.path.join(path, 'hallucinator.ckpt'))
        sets = {name: load_checkpoint(os.path.join(path, name + '.ckpt')) for name in state['adam_sets']}
        self.optimizer.load_state(sets, state['adam_steps'])
        self.sample_rng.bit_generator.state = state['sample_rng']
        self.noise_rng.bit_generator.state = state['noise_rng']
        self.counters = Counters(state.get('counters', {}))
        self.epoch = int(state['epoch'])
        self.logger.info('Resumed from', path, 'at epoch', self.epoch)

    def _append_log(self, row, fresh):
        path = os.path.join(self.run_dir, 'log.csv')
        with open(path, 'w' if fresh else 'a', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator='\n')
            if fresh:
                writer.writeheader()
            writer.writerow({k: ('{:.10g}'.format(v) if isinstance(v, float) else v) for k, v in row.items()})

    def _truncate_log(self):
        """Drops log rows past the resumed epoch so a resumed run appends cleanly."""
        path = os.path.join(self.run_dir, 'log.csv')
        if not os.path.exists(path):
            return True
        with open(path, newline='') as f:
            rows = [r for r in csv.DictReader(f) if int(r['epoch']) <= self.epoch]
        with open(path, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator='\n')
            writer.writeheader()
            writer.writerows(rows)
        return False

    def train(self, resume=False):
        """Runs the remaining epochs, checkpointing every `checkpoint_every` epochs and at the end.

        Returns the (student, teacher) MetricsReports on the held-out test set.
        """
        os.makedirs(self.run_dir, exist_ok=True)
        last = os.path.join(self.checkpoint_dir, 'last')
        fresh = True
        if resume and os.path.exists(os.path.join(last, 'state.json')):
            self.load(last)
            fresh = self._truncate_log()
        elif resume:
            self.logger.warn('No checkpoint to resume from in', self.checkpoint_dir, '- starting fresh')
        epochs = range(self.epoch + 1, self.cfg.epochs + 1)
        if self.progress:
            epochs = tqdm(epochs, desc=self.cfg.mode, unit='epoch')
        for epoch in epochs:
            try:
                row = self.run_epoch(epoch)
            except Errors.NumericalError as ex:
                with open(os.path.join(self.run_dir, 'abort.json'), 'w') as f:
                    json.dump({k: str(v) for k, v in ex.context.items()}, f, indent=2, sort_keys=True)
                self.logger.warn('Numerical abort at epoch', epoch, '- last good checkpoint kept in', last)
                raise
            self.epoch = epoch
            self._append_log(row, fresh)
            fresh = False
            self.logger.info('epoch {}/{}'.format(epoch, self.cfg.epochs),
                             ' '.join('{}={}'.format(k, '{:.4f}'.format(v) if isinstance(v, float) else v)
                                      for k, v in row.items() if k != 'epoch'))
            if epoch % self.cfg.checkpoint_every == 0 or epoch == self.cfg.epochs:
                self.save('epoch_{:03d}'.format(epoch))
                self.save('last')
        reports = self.evaluate('student'), self.evaluate('teacher')
        self.write_reports(*reports)
        return reports

    def write_reports(self, student, teacher):
        with open(os.path.join(self.run_dir, 'report.json'), 'w') as f:
            f.write(student.to_json())
        with open(os.path.join(self.run_dir, 'report_teacher.json'), 'w') as f:
            f.write(teacher.to_json())
        with open(os.path.join(self.run_dir, 'report.csv'), 'w') as f:
            f.write(student.to_csv())
        with open(os.path.join(self.run_dir, 'report.txt'), 'w') as f:
            f.write(student.render_table() + '\n\n' + teacher.render_table() + '\n')
        with open(os.path.join(self.run_dir, 'counters.json'), 'w') as f:
            json.dump(dict(self.counters), f, indent=2, sort_keys=True)
