"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` wraps an ndarray. Every differentiable primitive is a `Function`
subclass (see `Ops.py`); applying one to tensors that require gradients
records a node on the active `Tape`. `backward` walks the recorded nodes that
lead to a scalar loss in reverse execution order and accumulates gradients
into the leaves.
"""
import threading
from itertools import count

import numpy as np

from . import Errors

_DTYPES = {32: np.float32, 64: np.float64}
_state = {'bits': 32, 'debug': False}
_sequence = count()

class _ThreadState(threading.local):
    """Recording switch and active tapes; each thread builds its own graphs."""
    def __init__(self):
        self.grad_enabled = True
        self.tapes = []

_local = _ThreadState()

def set_precision(bits):
    """Selects 32-bit or 64-bit elements for tensors created afterwards."""
    if bits not in _DTYPES:
        raise Errors.ConfigError('Precision must be 32 or 64', context={'bits': bits})
    _state['bits'] = bits

def get_precision():
    return _state['bits']

def get_dtype():
    return _DTYPES[_state['bits']]

def set_debug(flag):
    """Turns the finite-value check after every forward op on or off."""
    _state['debug'] = bool(flag)

class precision:
    """Context manager that temporarily switches the global precision."""
    def __init__(self, bits):
        self.bits = bits
        self.previous = None

    def __enter__(self):
        self.previous = get_precision()
        set_precision(self.bits)
        return self

    def __exit__(self, *exc):
        set_precision(self.previous)
        return False

class no_grad:
    """Disables tape recording; used for teacher predictions and evaluation."""
    def __enter__(self):
        self.previous = _local.grad_enabled
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self.previous
        return False

def grad_enabled():
    return _local.grad_enabled

class Tape:
    """Ordered record of executed primitive ops.

    Nodes are appended in execution order, so every node's inputs were
    produced by earlier nodes (or are leaves). A backward pass releases the
    nodes it visits; a loss whose nodes were released cannot be
    differentiated again until its forward pass is rebuilt.
    """
    def __init__(self):
        self.nodes = []

    @classmethod
    def current(cls):
        tapes = _local.tapes
        return tapes[-1] if tapes else _GLOBAL_TAPE

    def record(self, node):
        node.tape = self
        self.nodes.append(node)

    def release(self, nodes):
        released = set(map(id, nodes))
        for node in nodes:
            node.released = True
        self.nodes = [node for node in self.nodes if id(node) not in released]

    def reset(self):
        for node in self.nodes:
            node.released = True
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _local.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        self.reset()
        return False

    def __repr__(self):
        return '<Tape nodes={}>'.format(len(self.nodes))

_GLOBAL_TAPE = Tape()

class Function:
    """Base class for differentiable primitives.

    Subclasses implement `forward(*arrays, **kwargs)` returning an ndarray and
    `backward(grad)` returning one gradient array (or None) per input.
    """
    def __init__(self, *inputs):
        self.inputs = inputs
        self.seq = next(_sequence)
        self.tape = None
        self.released = False

    def forward(self, *args, **kwargs):
        raise NotImplementedError('{} has no forward pass'.format(type(self).__name__))

    def backward(self, grad):
        raise NotImplementedError('{} has no backward pass'.format(type(self).__name__))

    @classmethod
    def apply(cls, *inputs, **kwargs):
        tensors = tuple(as_tensor(x) for x in inputs)
        func = cls(*tensors)
        data = func.forward(*(t.data for t in tensors), **kwargs)
        if _state['debug'] and not np.all(np.isfinite(data)):
            raise Errors.NumericalError('Non-finite output from {}'.format(cls.__name__),
                                        context={'shape': data.shape})
        requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        out = Tensor(data, requires_grad=requires_grad, _copy=False)
        if requires_grad:
            out.creator = func
            func.output = out
            Tape.current().record(func)
        return out

    @staticmethod
    def unbroadcast(grad, shape):
        """Sums a broadcast gradient back down to `shape`."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad

    def __repr__(self):
        return '<{} #{}>'.format(type(self).__name__, self.seq)

class Tensor:
    """Dense floating-point array with an optional gradient slot."""
    def __init__(self, data, requires_grad=False, _copy=True):
        dtype = get_dtype()
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=dtype, copy=True) if _copy else np.asarray(data, dtype=dtype)
        if array.ndim == 0:
            array = array.reshape(())
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.creator = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def _accumulate(self, grad):
        if grad.shape != self.data.shape:
            raise Errors.ShapeError('Gradient shape does not match tensor shape',
                                    context={'tensor': self.data.shape, 'grad': grad.shape})
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad = self.grad + grad

    def __add__(self, other):
        from . import Ops
        return Ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import Ops
        return Ops.sub(self, other)

    def __rsub__(self, other):
        from . import Ops
        return Ops.sub(other, self)

    def __mul__(self, other):
        from . import Ops
        return Ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import Ops
        return Ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import Ops
        return Ops.getitem(self, index)

    def sum(self):
        from . import Ops
        return Ops.sum(self)

    def mean(self, axis=None, keepdims=False):
        from . import Ops
        return Ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import Ops
        return Ops.reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        from . import Ops
        return Ops.transpose(self, axes)

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return 'Tensor(shape={}, dtype={}{})'.format(self.shape, self.data.dtype, flag)

def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)

def backward(loss):
    """Populates `grad` on every requires_grad leaf reachable from `loss`."""
    if not isinstance(loss, Tensor):
        raise Errors.BackwardError('backward expects a Tensor')
    if loss.data.size != 1:
        raise Errors.BackwardError('backward requires a scalar loss', context={'shape': loss.shape})
    if loss.creator is None:
        if loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
        return
    if loss.creator.released:
        raise Errors.BackwardError('Graph of this loss was already released by a previous backward; '
                                   'rebuild the forward pass or reset the tape')
    nodes = _reachable(loss.creator)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        out_grad = grads.pop(id(node.output), None)
        if out_grad is None:
            continue
        in_grads = node.backward(out_grad)
        if not isinstance(in_grads, tuple):
            in_grads = (in_grads,)
        for tensor, grad in zip(node.inputs, in_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.creator is None:
                tensor._accumulate(grad)
            else:
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad
    tapes = {}
    for node in nodes:
        tapes.setdefault(id(node.tape), (node.tape, []))[1].append(node)
    for tape, owned in tapes.values():
        tape.release(owned)

def _reachable(root):
    """Nodes feeding `root`, each once, in reverse execution order."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        if node.released:
            raise Errors.BackwardError('Graph contains a node released by a previous backward')
        seen[id(node)] = node
        for tensor in node.inputs:
            if tensor.creator is not None and id(tensor.creator) not in seen:
                stack.append(tensor.creator)
    return sorted(seen.values(), key=lambda node: node.seq, reverse=True)
