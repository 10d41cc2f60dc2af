"""Procedural two-modality, four-structure segmentation benchmark.

Source images render each class with its intensity; target images deform
the geometry with a smooth random field and remap intensities through
g(v) = 1 - v^gamma. `make_source_like` inverts g analytically.
"""
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from . import Errors
from .Tensor import get_dtype, get_precision

CLASS_NAMES = ('background', 'AA', 'LAC', 'LVC', 'MYO')
FOREGROUND = CLASS_NAMES[1:]
NUM_CLASSES = len(CLASS_NAMES)
AA, LAC, LVC, MYO = 1, 2, 3, 4
DOMAINS = ('source', 'target', 'source_like')

@dataclass
class SynthConfig:
    size: int = 64
    shots: int = 4
    n_unlabeled_source: int = 12
    n_target: int = 48
    n_target_test: int = 16
    deformation: float = 0.08
    deformation_grid: int = 4
    noise_sigma: float = 0.02
    gamma: float = 1.5
    remap: str = 'power'
    margin: int = 2
    max_tries: int = 1000
    profiles: list = field(default_factory=lambda: [[0.02, 0.10], [0.85, 0.95], [0.55, 0.65],
                                                      [0.72, 0.82], [0.30, 0.40]])

    def __post_init__(self):
        if self.size < 16:
            raise Errors.ConfigError('Image size must be at least 16', context={'size': self.size})
        if self.remap not in ('power', 'identity'):
            raise Errors.ConfigError('remap must be "power" or "identity"', context={'remap': self.remap})
        if len(self.profiles) != NUM_CLASSES:
            raise Errors.ConfigError('One intensity range per class is required',
                                     context={'profiles': len(self.profiles)})
        if self.gamma <= 0:
            raise Errors.ConfigError('gamma must be positive', context={'gamma': self.gamma})

@dataclass
class DomainDataset:
    images: np.ndarray
    labels: Optional[np.ndarray]
    domain: str
    subjects: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise Errors.ShapeError('Images must be [n,1,H,W]', context={'shape': self.images.shape})
        if self.domain not in DOMAINS:
            raise Errors.ConfigError('Unknown domain tag', context={'domain': self.domain})
        if self.subjects.shape != (len(self.images),):
            raise Errors.ShapeError('One subject id per image is required',
                                    context={'images': len(self.images), 'subjects': self.subjects.shape})
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (self.images.shape[0],) + self.images.shape[2:]:
                raise Errors.ShapeError('Labels must be [n,H,W]',
                                        context={'images': self.images.shape, 'labels': self.labels.shape})
            if self.labels.size and self.labels.max() >= NUM_CLASSES:
                raise Errors.LabelError('Label values must lie in [0, {})'.format(NUM_CLASSES),
                                        context={'max': int(self.labels.max())})

    @property
    def has_labels(self):
        return self.labels is not None

    def __len__(self):
        return len(self.images)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        labels = self.labels[indices] if self.has_labels else None
        return DomainDataset(self.images[indices], labels, self.domain, self.subjects[indices])

    def without_labels(self):
        return DomainDataset(self.images, None, self.domain, self.subjects)

    def with_labels(self, labels):
        return DomainDataset(self.images, labels, self.domain, self.subjects)

    def __repr__(self):
        return '<DomainDataset {} n={} labeled={}>'.format(self.domain, len(self), self.has_labels)

def _ellipse(shape, cy, cx, a, b, angle):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)

def sample_geometry(cfg, rng):
    """Label map with a MYO ring around an LVC disc and two separate ellipses (AA, LAC)."""
    S = cfg.size
    shape = (S, S)
    structure = ndimage.generate_binary_structure(2, 1)
    for _ in range(cfg.max_tries):
        labels = np.zeros(shape, dtype=np.uint8)
        cy, cx = rng.uniform(0.3 * S, 0.7 * S, size=2)
        r_out = rng.uniform(0.16, 0.22) * S
        r_in = r_out - rng.uniform(0.05, 0.08) * S
        stretch = rng.uniform(0.85, 1.15)
        angle = rng.uniform(0, np.pi)
        dist = _ellipse(shape, cy, cx, stretch, 1.0 / stretch, angle)
        heart = dist < r_out
        labels[heart] = MYO
        labels[dist < r_in] = LVC
        occupied = ndimage.binary_dilation(heart, structure, iterations=cfg.margin)
        ok = not (heart[0].any() or heart[-1].any() or heart[:, 0].any() or heart[:, -1].any())
        for cls, (lo, hi) in ((AA, (0.06, 0.10)), (LAC, (0.08, 0.13))):
            if not ok:
                break
            ey, ex = rng.uniform(0.12 * S, 0.88 * S, size=2)
            a, b = rng.uniform(lo, hi, size=2) * S
            mask = _ellipse(shape, ey, ex, a, b, rng.uniform(0, np.pi)) < 1.0
            if not mask.any() or (mask & occupied).any():
                ok = False
                break
            labels[mask] = cls
            occupied |= ndimage.binary_dilation(mask, structure, iterations=cfg.margin)
        if ok and all((labels == cls).any() for cls in range(1, NUM_CLASSES)):
            return labels
    raise Errors.SynthError('Could not place non-overlapping structures', context={'tries': cfg.max_tries})

def sample_intensities(cfg, rng):
    """Per-subject constant intensity per class, drawn from the class range."""
    return np.array([rng.uniform(lo, hi) for lo, hi in cfg.profiles])

def smooth_field(cfg, rng):
    """[2,S,S] displacement in pixels, cubic interpolation of a coarse random grid."""
    S, g = cfg.size, cfg.deformation_grid
    scale = cfg.deformation * (S - 1) / 2.0
    control = rng.uniform(-scale, scale, size=(2, g, g))
    coords = np.linspace(0, g - 1, S)
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    return np.stack([ndimage.map_coordinates(c, [yy, xx], order=3, mode='nearest') for c in control])

def deform(labels, displacement):
    S = labels.shape
    yy, xx = np.mgrid[0:S[0], 0:S[1]].astype(np.float64)
    coords = [yy + displacement[0], xx + displacement[1]]
    return ndimage.map_coordinates(labels, coords, order=0, mode='nearest').astype(np.uint8)

def remap_intensity(images, cfg):
    if cfg.remap == 'identity':
        return images
    return 1.0 - np.power(images, cfg.gamma)

def render(labels, values, cfg, rng, remap=False):
    """Image in [0,1]: class intensities, optional target remap, then additive noise."""
    image = values[labels].astype(np.float64)
    if remap:
        image = remap_intensity(image, cfg)
    if cfg.noise_sigma > 0:
        image = np.clip(image + rng.normal(0.0, cfg.noise_sigma, size=image.shape), 0.0, 1.0)
    return image

def _source_subject(cfg, rng):
    labels = sample_geometry(cfg, rng)
    return render(labels, sample_intensities(cfg, rng), cfg, rng), labels

def _target_subject(cfg, rng):
    labels = sample_geometry(cfg, rng)
    values = sample_intensities(cfg, rng)
    for _ in range(cfg.max_tries):
        moved = deform(labels, smooth_field(cfg, rng)) if cfg.deformation > 0 else labels
        if all((moved == cls).any() for cls in range(1, NUM_CLASSES)):
            return render(moved, values, cfg, rng, remap=True), moved
    raise Errors.SynthError('Deformation erased a structure', context={'tries': cfg.max_tries})

def generate(cfg, rng):
    """Returns (source, target, target_labels); target labels are for evaluation only.

    Every subject draws from its own spawned generator, so results depend
    only on (cfg, seed).
    """
    n_source = cfg.shots + cfg.n_unlabeled_source
    n_target = cfg.n_target + cfg.n_target_test
    streams = rng.spawn(n_source + n_target)
    source = [_source_subject(cfg, streams[i]) for i in range(n_source)]
    target = [_target_subject(cfg, streams[n_source + i]) for i in range(n_target)]
    dtype = get_dtype()
    source_set = DomainDataset(np.stack([img for img, _ in source])[:, None].astype(dtype),
                               np.stack([lab for _, lab in source]), 'source', np.arange(n_source))
    target_set = DomainDataset(np.stack([img for img, _ in target])[:, None].astype(dtype),
                               None, 'target', np.arange(n_source, n_source + n_target))
    return source_set, target_set, np.stack([lab for _, lab in target])

def make_source_like(target, cfg):
    """Applies g^{-1}(v) = (1 - v)^(1/gamma) to target images."""
    images = np.asarray(target.images, dtype=np.float64)
    if cfg.remap == 'power':
        images = np.power(1.0 - np.clip(images, 0.0, 1.0), 1.0 / cfg.gamma)
    return DomainDataset(images.astype(target.images.dtype), None, 'source_like', target.subjects)

def few_shot_split(source, k, seed):
    """Labeled subset of k subjects and the unlabeled remainder.

    Subjects are visited in one fixed shuffled order and seed r takes the
    window starting at r * k, so consecutive seeds pick distinct subjects
    while the pool lasts.
    """
    if not source.has_labels:
        raise Errors.LabelError('few_shot_split needs a labeled source dataset')
    subjects = np.unique(source.subjects)
    if not 1 <= k <= len(subjects):
        raise Errors.ConfigError('k must lie in [1, subject count]', context={'k': k, 'subjects': len(subjects)})
    order = np.random.default_rng(len(subjects)).permutation(subjects)
    start = (int(seed) * k) % len(subjects)
    chosen = np.roll(order, -start)[:k]
    mask = np.isin(source.subjects, chosen)
    labeled = source.subset(np.flatnonzero(mask))
    unlabeled = source.subset(np.flatnonzero(~mask)).without_labels()
    return labeled, unlabeled

def zscore(images):
    """Per-image standardization to zero mean and unit deviation."""
    images = np.asarray(images)
    axes = tuple(range(1, images.ndim))
    mean = images.mean(axis=axes, keepdims=True)
    std = images.std(axis=axes, keepdims=True)
    return ((images - mean) / (std + 1e-8)).astype(images.dtype)

DATASET_MAGIC = b'MHAL'
DATASET_VERSION = 1
_HEADER = struct.Struct('<4sHBBBIII')

def header_size(n):
    """Fixed fields, subject-id table and CRC."""
    return _HEADER.size + 4 * n + 4

def save(dataset, path, meta=None):
    """Writes the binary dataset and, when `meta` is given, a JSON sidecar next to it."""
    bits = get_precision()
    n, _, H, W = dataset.images.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, bits, DOMAINS.index(dataset.domain),
                          int(dataset.has_labels), n, H, W)
    header += struct.pack('<{}I'.format(n), *dataset.subjects.tolist())
    header += struct.pack('<I', zlib.crc32(header))
    with open(path, 'wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(dataset.images, dtype='<f{}'.format(bits // 8)).tobytes())
        if dataset.has_labels:
            f.write(np.ascontiguousarray(dataset.labels, dtype=np.uint8).tobytes())
    if meta is not None:
        sidecar = {'domain': dataset.domain, 'count': n, 'size': [H, W], 'labeled': dataset.has_labels}
        sidecar.update(meta)
        with open(str(path) + '.json', 'w') as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)

def load(path):
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as ex:
        raise Errors.DatasetFormatError('Cannot read dataset: {}'.format(ex), context={'path': path})
    if len(raw) < _HEADER.size:
        raise Errors.DatasetFormatError('Dataset file is truncated', context={'path': path})
    magic, version, bits, domain, has_labels, n, H, W = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise Errors.DatasetFormatError('Bad magic', context={'path': path})
    if version != DATASET_VERSION:
        raise Errors.DatasetFormatError('Unsupported version', context={'path': path, 'version': version})
    if bits not in (32, 64) or domain >= len(DOMAINS) or has_labels not in (0, 1):
        raise Errors.DatasetFormatError('Corrupted header fields', context={'path': path})
    head = header_size(n)
    pixels = n * H * W
    expected = head + pixels * bits // 8 + (pixels if has_labels else 0)
    if len(raw) != expected:
        raise Errors.DatasetFormatError('Dataset size does not match its header',
                                        context={'path': path, 'size': len(raw), 'expected': expected})
    crc, = struct.unpack_from('<I', raw, head - 4)
    if crc != zlib.crc32(raw[:head - 4]):
        raise Errors.DatasetFormatError('Header checksum mismatch', context={'path': path})
    subjects = np.frombuffer(raw, dtype='<u4', count=n, offset=_HEADER.size).astype(np.int64)
    images = np.frombuffer(raw, dtype='<f{}'.format(bits // 8), count=pixels, offset=head)
    images = images.reshape(n, 1, H, W).astype(get_dtype())
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype=np.uint8, count=pixels, offset=head + pixels * bits // 8)
        labels = labels.reshape(n, H, W).copy()
    return DomainDataset(images, labels, DOMAINS[domain], subjects)
