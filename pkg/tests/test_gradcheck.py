import numpy as np
import pytest

from MetaHal import Errors
from MetaHal import Ops
from MetaHal.GradCheck import grad_check, numerical_gradient
from MetaHal.Tensor import Function, Tensor

class WrongSquare(Function):
    """Square with a backward that is off by a factor of two."""
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return grad * self.a

def test_correct_gradient_passes(rng, f64):
    closure = lambda a, b: Ops.sum(Ops.mul(a, b))
    assert grad_check(closure, [rng.standard_normal(4), rng.standard_normal(4)]) < 1e-8

def test_wrong_gradient_is_caught(rng, f64):
    closure = lambda a: Ops.sum(WrongSquare.apply(a))
    assert grad_check(closure, [rng.uniform(1.0, 2.0, size=3)]) > 0.1

def test_numerical_gradient_of_quadratic(f64):
    grad = numerical_gradient(lambda a: Ops.sum(Ops.mul(a, a)), [np.array([1.0, -2.0])], 0, 1e-6)
    np.testing.assert_allclose(grad, [2.0, -4.0], rtol=1e-8)

def test_nonpositive_eps_rejected():
    with pytest.raises(Errors.ConfigError):
        grad_check(lambda a: Ops.sum(a), [np.ones(2)], eps=0.0)

def test_non_finite_closure_rejected(f64):
    closure = lambda a: Ops.sum(Ops.mul(a, Tensor(np.array([np.inf, 1.0]))))
    with pytest.raises(Errors.NumericalError):
        grad_check(closure, [np.ones(2)])
