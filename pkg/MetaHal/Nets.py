"""Segmenter (2D U-Net), hallucinator (spatial transformer) and warping."""
import json
import struct
import zlib

import numpy as np

from . import Errors
from . import Ops
from .Tensor import Tensor, get_dtype, get_precision

class ParamSet:
    """Named parameter collection.

    Values are plain arrays for stored parameters, or `Tensor` leaves while a
    loss is being differentiated w.r.t. them (see `leaves`).
    """
    def __init__(self, name, values, meta=None):
        self.name = name
        self.values = dict(values)
        self.meta = dict(meta or {})

    def keys(self):
        return list(self.values.keys())

    def tensor(self, key):
        value = self.values[key]
        return value if isinstance(value, Tensor) else Tensor(value, _copy=False)

    def array(self, key):
        value = self.values[key]
        return value.data if isinstance(value, Tensor) else value

    def arrays(self):
        return {key: self.array(key) for key in self.values}

    def leaves(self):
        """Copy whose values are fresh requires_grad leaves."""
        values = {key: Tensor(self.array(key), requires_grad=True) for key in self.values}
        return ParamSet(self.name, values, self.meta)

    def grads(self):
        grads = {}
        for key, value in self.values.items():
            grad = value.grad if isinstance(value, Tensor) else None
            grads[key] = grad if grad is not None else np.zeros_like(self.array(key))
        return grads

    def copy(self):
        return ParamSet(self.name, {key: np.array(self.array(key), copy=True) for key in self.values}, self.meta)

    def updated(self, deltas, scale=1.0):
        """New arrays `value - scale * delta` for every key present in `deltas`."""
        values = {}
        for key in self.values:
            value = self.array(key)
            values[key] = value - scale * deltas[key] if key in deltas else np.array(value, copy=True)
        return ParamSet(self.name, values, self.meta)

    def shapes(self):
        return {key: tuple(self.array(key).shape) for key in self.values}

    def count(self):
        return int(sum(self.array(key).size for key in self.values))

    def is_finite(self):
        return all(np.all(np.isfinite(self.array(key))) for key in self.values)

    def check_compatible(self, other):
        if self.shapes() != other.shapes():
            raise Errors.ShapeError('Parameter collections are not shape-compatible',
                                    context={'left': self.name, 'right': other.name})

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return '<ParamSet {} tensors={} elements={}>'.format(self.name, len(self), self.count())

def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(get_dtype())

def _conv_params(values, rng, prefix, cin, cout, k):
    values[prefix + '.weight'] = _he(rng, (cout, cin, k, k))
    values[prefix + '.bias'] = np.zeros(cout, dtype=get_dtype())

def unet_channels(depth, base):
    return [base * 2 ** level for level in range(depth + 1)]

def init_segmenter(rng, depth=3, base=16, classes=5, in_channels=1):
    """He-initialized U-Net parameters; the key set depends only on the architecture."""
    chans = unet_channels(depth, base)
    values = {}
    cin = in_channels
    for level in range(depth):
        _conv_params(values, rng, 'enc{}.conv1'.format(level), cin, chans[level], 3)
        _conv_params(values, rng, 'enc{}.conv2'.format(level), chans[level], chans[level], 3)
        cin = chans[level]
    _conv_params(values, rng, 'mid.conv1', chans[depth - 1], chans[depth], 3)
    _conv_params(values, rng, 'mid.conv2', chans[depth], chans[depth], 3)
    for level in reversed(range(depth)):
        _conv_params(values, rng, 'dec{}.conv1'.format(level), chans[level + 1] + chans[level], chans[level], 3)
        _conv_params(values, rng, 'dec{}.conv2'.format(level), chans[level], chans[level], 3)
    _conv_params(values, rng, 'head', chans[0], classes, 1)
    meta = {'depth': depth, 'base': base, 'classes': classes, 'in_channels': in_channels}
    return ParamSet('segmenter', values, meta)

def segmenter_param_count(depth, base, classes, in_channels=1):
    chans = unet_channels(depth, base)
    conv = lambda cin, cout, k: cout * cin * k * k + cout
    total = 0
    cin = in_channels
    for level in range(depth):
        total += conv(cin, chans[level], 3) + conv(chans[level], chans[level], 3)
        cin = chans[level]
    total += conv(chans[depth - 1], chans[depth], 3) + conv(chans[depth], chans[depth], 3)
    for level in range(depth):
        total += conv(chans[level + 1] + chans[level], chans[level], 3) + conv(chans[level], chans[level], 3)
    return total + conv(chans[0], classes, 1)

def _block(params, prefix, x):
    for conv in ('conv1', 'conv2'):
        key = '{}.{}'.format(prefix, conv)
        x = Ops.conv2d(x, params.tensor(key + '.weight'), params.tensor(key + '.bias'), padding=1)
        x = Ops.leaky_relu(Ops.instance_norm(x), 0.01)
    return x

def segment(params, images):
    """U-Net forward pass: [B,1,H,W] images -> [B,C,H,W] logits."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    depth = params.meta['depth']
    H, W = images.shape[2:]
    step = 2 ** depth
    if H % step or W % step:
        raise Errors.ShapeError('Spatial dims must be divisible by 2^depth = {}'.format(step),
                                context={'height': H, 'width': W, 'depth': depth})
    skips = []
    x = images
    for level in range(depth):
        x = _block(params, 'enc{}'.format(level), x)
        skips.append(x)
        x = Ops.max_pool2d(x)
    x = _block(params, 'mid', x)
    for level in reversed(range(depth)):
        x = Ops.upsample_bilinear(x)
        x = Ops.concat([x, skips[level]], axis=1)
        x = _block(params, 'dec{}'.format(level), x)
    return Ops.conv2d(x, params.tensor('head.weight'), params.tensor('head.bias'))

IDENTITY_AFFINE = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

def init_hallucinator(rng, kind='affine', channels=(8, 16, 16), in_channels=2):
    """Localization CNN over (moving, fixed); the head starts at the identity transform."""
    if kind not in ('affine', 'dense'):
        raise Errors.ConfigError('Unknown transform kind', context={'kind': kind})
    values = {}
    cin = in_channels
    for index, cout in enumerate(channels):
        _conv_params(values, rng, 'loc{}'.format(index), cin, cout, 3)
        cin = cout
    if kind == 'affine':
        values['head.weight'] = np.zeros((6, cin, 1, 1), dtype=get_dtype())
        values['head.bias'] = np.array(IDENTITY_AFFINE, dtype=get_dtype())
    else:
        values['head.weight'] = np.zeros((2, cin, 3, 3), dtype=get_dtype())
        values['head.bias'] = np.zeros(2, dtype=get_dtype())
    meta = {'kind': kind, 'layers': len(channels)}
    return ParamSet('hallucinator', values, meta)

class SpatialTransform:
    """Affine matrices [B,2,3] or dense displacement fields [B,H,W,2], normalized units."""
    AFFINE = 'affine'
    DENSE = 'dense'
    def __init__(self, kind, params):
        if kind not in (self.AFFINE, self.DENSE):
            raise Errors.ConfigError('Unknown transform kind', context={'kind': kind})
        self.kind = kind
        self.params = params if isinstance(params, Tensor) else Tensor(params)
        expected = 3 if kind == self.AFFINE else 4
        if self.params.ndim != expected:
            raise Errors.ShapeError('Transform parameters have the wrong rank',
                                    context={'kind': kind, 'shape': self.params.shape})

    @property
    def batch(self):
        return self.params.shape[0]

    @classmethod
    def identity(cls, batch, size=None, kind=AFFINE):
        if kind == cls.AFFINE:
            theta = np.tile(np.array(IDENTITY_AFFINE).reshape(1, 2, 3), (batch, 1, 1))
            return cls(kind, theta)
        return cls(kind, np.zeros((batch,) + tuple(size) + (2,)))

    @classmethod
    def translation(cls, tx, ty, batch=1):
        """Samples the input at (x + tx, y + ty): content moves by (-tx, -ty)."""
        theta = np.tile(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]), (batch, 1, 1))
        return cls(cls.AFFINE, theta)

    @classmethod
    def rotation(cls, angles):
        """One rotation about the image centre per entry of `angles` (radians)."""
        angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
        cos, sin = np.cos(angles), np.sin(angles)
        zeros = np.zeros_like(angles)
        theta = np.stack([np.stack([cos, -sin, zeros], -1), np.stack([sin, cos, zeros], -1)], 1)
        return cls(cls.AFFINE, theta)

    def to_grid(self, height, width):
        """Differentiable sampling grid [B,H,W,2]."""
        if self.kind == self.AFFINE:
            return Ops.affine_grid(self.params, (height, width))
        if self.params.shape[1:3] != (height, width):
            raise Errors.ShapeError('Displacement field does not match the image size',
                                    context={'field': self.params.shape, 'image': (height, width)})
        base = Ops.base_grid(height, width, get_dtype())[None, :, :, :2]
        return Ops.add(self.params, base)

    def select(self, indices):
        """Per-item transform for each index (repeats allowed); keeps the gradient path."""
        return SpatialTransform(self.kind, Ops.getitem(self.params, np.asarray(indices)))

    def detach(self):
        return SpatialTransform(self.kind, self.params.detach())

    def __repr__(self):
        return '<SpatialTransform {} batch={}>'.format(self.kind, self.batch)

def hallucinate(params, moving, fixed):
    """Predicts a transform moving -> fixed and returns it with the warped moving image."""
    moving = moving if isinstance(moving, Tensor) else Tensor(moving)
    fixed = fixed if isinstance(fixed, Tensor) else Tensor(fixed)
    if moving.shape != fixed.shape:
        raise Errors.ShapeError('Moving and fixed images must share a shape',
                                context={'moving': moving.shape, 'fixed': fixed.shape})
    x = Ops.concat([moving, fixed], axis=1)
    layers = params.meta['layers']
    for index in range(layers):
        key = 'loc{}'.format(index)
        x = Ops.relu(Ops.conv2d(x, params.tensor(key + '.weight'), params.tensor(key + '.bias'),
                                stride=2, padding=1))
    if params.meta['kind'] == SpatialTransform.AFFINE:
        pooled = Ops.mean(x, axis=(2, 3), keepdims=True)
        out = Ops.conv2d(pooled, params.tensor('head.weight'), params.tensor('head.bias'))
        transform = SpatialTransform(SpatialTransform.AFFINE, Ops.reshape(out, (moving.shape[0], 2, 3)))
    else:
        field = Ops.conv2d(x, params.tensor('head.weight'), params.tensor('head.bias'), padding=1)
        while field.shape[2] < moving.shape[2]:
            field = Ops.upsample_bilinear(field)
        if field.shape[2:] != moving.shape[2:]:
            raise Errors.ShapeError('Spatial dims must be divisible by 2^{}'.format(layers),
                                    context={'image': moving.shape[2:], 'field': field.shape[2:]})
        transform = SpatialTransform(SpatialTransform.DENSE, Ops.transpose(field, (0, 2, 3, 1)))
    return transform, warp(moving, transform)

def _nearest_indices(transform, height, width):
    """Rounded source indices, clamped, plus the mask of points that fell inside the image."""
    grid = transform.to_grid(height, width).data
    ix = np.rint((grid[..., 0] + 1.0) * (width - 1) / 2.0)
    iy = np.rint((grid[..., 1] + 1.0) * (height - 1) / 2.0)
    inside = (ix >= 0) & (ix <= width - 1) & (iy >= 0) & (iy <= height - 1)
    ix = np.clip(ix, 0, width - 1).astype(np.int64)
    iy = np.clip(iy, 0, height - 1).astype(np.int64)
    return iy, ix, inside

def warp(image, transform, interp='bilinear', padding='zeros'):
    """Resamples [B,K,H,W] through the transform.

    Bilinear sampling is differentiable; nearest sampling only ever copies
    input values. Outside the image both read zeros, or the nearest edge
    pixel with `padding='border'`.
    """
    if interp == 'bilinear':
        image = image if isinstance(image, Tensor) else Tensor(image)
        grid = transform.to_grid(image.shape[2], image.shape[3])
        return Ops.grid_sample(image, grid, padding=padding)
    if interp != 'nearest':
        raise Errors.ConfigError('Unknown interpolation', context={'interp': interp})
    if padding not in Ops.PADDING_MODES:
        raise Errors.ConfigError('Unknown padding mode', context={'padding': padding})
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    B, K, H, W = data.shape
    iy, ix, inside = _nearest_indices(transform, H, W)
    batch = np.arange(B)[:, None, None]
    out = data.transpose(0, 2, 3, 1)[batch, iy, ix]
    if padding == 'zeros':
        out = out * inside[..., None]
    return Tensor(np.moveaxis(out, -1, 1))

def warp_labels(labels, transform):
    """Nearest-neighbour warp of [B,H,W] integer label maps; outside the image is background."""
    labels = np.asarray(labels)
    B, H, W = labels.shape
    iy, ix, inside = _nearest_indices(transform, H, W)
    return np.where(inside, labels[np.arange(B)[:, None, None], iy, ix], 0).astype(labels.dtype)

CHECKPOINT_MAGIC = b'MHCK'
CHECKPOINT_VERSION = 1

def save_checkpoint(params, path):
    """Header (magic, version, precision, meta, name/shape table, CRC) + little-endian payloads."""
    bits = get_precision()
    dtype = '<f{}'.format(bits // 8)
    header = bytearray()
    header += CHECKPOINT_MAGIC
    header += struct.pack('<HB', CHECKPOINT_VERSION, bits)
    for text in (params.name, json.dumps(params.meta, sort_keys=True)):
        raw = text.encode('utf-8')
        header += struct.pack('<I', len(raw)) + raw
    header += struct.pack('<I', len(params))
    for key in params.keys():
        raw = key.encode('utf-8')
        shape = params.array(key).shape
        header += struct.pack('<H', len(raw)) + raw + struct.pack('<B', len(shape))
        header += struct.pack('<{}I'.format(len(shape)), *shape)
    header += struct.pack('<I', zlib.crc32(bytes(header)))
    with open(path, 'wb') as f:
        f.write(bytes(header))
        for key in params.keys():
            f.write(np.ascontiguousarray(params.array(key), dtype=dtype).tobytes())

class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise Errors.CheckpointError('Checkpoint is truncated', context={'path': self.path})
        values = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return values

    def text(self, fmt):
        length, = self.take(fmt)
        if self.pos + length > len(self.raw):
            raise Errors.CheckpointError('Checkpoint is truncated', context={'path': self.path})
        raw = self.raw[self.pos:self.pos + length]
        self.pos += length
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError:
            raise Errors.CheckpointError('Checkpoint header is corrupted', context={'path': self.path})

def load_checkpoint(path):
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as ex:
        raise Errors.CheckpointError('Cannot read checkpoint: {}'.format(ex), context={'path': path})
    reader = _Reader(raw, path)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise Errors.CheckpointError('Not a checkpoint file (bad magic)', context={'path': path})
    reader.pos = 4
    version, bits = reader.take('<HB')
    if version != CHECKPOINT_VERSION or bits not in (32, 64):
        raise Errors.CheckpointError('Unsupported checkpoint version or precision',
                                     context={'path': path, 'version': version, 'bits': bits})
    name = reader.text('<I')
    meta_text = reader.text('<I')
    count, = reader.take('<I')
    table = []
    for _ in range(count):
        key = reader.text('<H')
        ndim, = reader.take('<B')
        table.append((key, reader.take('<{}I'.format(ndim))))
    end = reader.pos
    crc, = reader.take('<I')
    if crc != zlib.crc32(raw[:end]):
        raise Errors.CheckpointError('Checkpoint header checksum mismatch', context={'path': path})
    try:
        meta = json.loads(meta_text)
    except ValueError:
        raise Errors.CheckpointError('Checkpoint metadata is corrupted', context={'path': path})
    dtype = np.dtype('<f{}'.format(bits // 8))
    values = {}
    for key, shape in table:
        size = int(np.prod(shape)) * dtype.itemsize
        if reader.pos + size > len(raw):
            raise Errors.CheckpointError('Checkpoint payload is truncated', context={'path': path, 'tensor': key})
        values[key] = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=reader.pos).reshape(shape).astype(get_dtype())
        reader.pos += size
    if reader.pos != len(raw):
        raise Errors.CheckpointError('Checkpoint has trailing bytes', context={'path': path})
    return ParamSet(name, values, meta)
