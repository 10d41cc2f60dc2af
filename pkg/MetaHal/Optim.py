import numpy as np

from . import Errors
from .Nets import ParamSet

class Adam:
    """Adam with moments kept per parameter collection across calls."""
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.moments = {}
        self.steps = {}

    def step(self, params, grads, lr):
        """Returns the updated collection; `params` itself is left untouched."""
        name = params.name
        m, v = self.moments.setdefault(name, ({}, {}))
        t = self.steps.get(name, 0) + 1
        self.steps[name] = t
        values = {}
        for key in params.keys():
            value = params.array(key)
            grad = np.asarray(grads.get(key, np.zeros_like(value)), dtype=value.dtype)
            m[key] = self.beta1 * m.get(key, np.zeros_like(value)) + (1 - self.beta1) * grad
            v[key] = self.beta2 * v.get(key, np.zeros_like(value)) + (1 - self.beta2) * grad * grad
            m_hat = m[key] / (1 - self.beta1 ** t)
            v_hat = v[key] / (1 - self.beta2 ** t)
            values[key] = value - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        out = ParamSet(name, values, params.meta)
        if not out.is_finite():
            raise Errors.NumericalError('Optimizer step produced non-finite parameters',
                                        context={'params': name, 'step': t})
        return out

    def state(self):
        """Moments as ParamSets (checkpointable) plus the step counters."""
        sets = {}
        for name, (m, v) in self.moments.items():
            sets['adam_m.' + name] = ParamSet('adam_m.' + name, m)
            sets['adam_v.' + name] = ParamSet('adam_v.' + name, v)
        return sets, dict(self.steps)

    def load_state(self, sets, steps):
        self.moments = {}
        for key, params in sets.items():
            kind, name = key.split('.', 1)
            m, v = self.moments.setdefault(name, ({}, {}))
            (m if kind == 'adam_m' else v).update(params.arrays())
        self.steps = {name: int(t) for name, t in steps.items()}
