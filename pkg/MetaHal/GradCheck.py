import numpy as np

from . import Errors
from .Tensor import Tape, Tensor, backward, no_grad

def _evaluate(op_closure, arrays):
    with no_grad():
        out = op_closure(*(Tensor(a) for a in arrays))
    value = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(value):
        raise Errors.NumericalError('grad_check closure produced a non-finite value')
    return value

def numerical_gradient(op_closure, arrays, index, eps):
    """Central-difference gradient of the closure w.r.t. `arrays[index]`."""
    arrays = [np.array(a, copy=True) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = _evaluate(op_closure, arrays)
        flat[i] = orig - eps
        minus = _evaluate(op_closure, arrays)
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * eps)
    return grad

def analytic_gradients(op_closure, arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        out = op_closure(*leaves)
        if out.size != 1:
            raise Errors.BackwardError('grad_check closure must return a scalar', context={'shape': out.shape})
        if not np.all(np.isfinite(out.data)):
            raise Errors.NumericalError('grad_check closure produced a non-finite value')
        backward(out)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

def grad_check(op_closure, inputs, eps=1e-6):
    """Max over all input elements of |analytic - numeric| / max(1, |analytic|)."""
    if eps <= 0:
        raise Errors.ConfigError('grad_check eps must be positive', context={'eps': eps})
    arrays = [np.array(Tensor(x).data) for x in inputs]
    analytic = analytic_gradients(op_closure, arrays)
    worst = 0.0
    for index, grad in enumerate(analytic):
        numeric = numerical_gradient(op_closure, arrays, index, eps)
        if not np.all(np.isfinite(grad)):
            raise Errors.NumericalError('Analytic gradient is not finite', context={'input': index})
        err = np.abs(grad - numeric) / np.maximum(1.0, np.abs(grad))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
