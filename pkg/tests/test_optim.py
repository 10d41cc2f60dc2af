import numpy as np
import pytest

from MetaHal import Errors
from MetaHal.Nets import ParamSet
from MetaHal.Optim import Adam

def params():
    return ParamSet('p', {'w': np.array([1.0, -2.0]), 'b': np.array([0.5])})

def test_zero_gradients_leave_parameters(f64):
    p = params()
    out = Adam().step(p, {'w': np.zeros(2), 'b': np.zeros(1)}, 0.1)
    for key in p.keys():
        np.testing.assert_array_equal(out.array(key), p.array(key))

def test_first_step_moves_by_lr_against_gradient(f64):
    out = Adam().step(params(), {'w': np.array([3.0, -0.1]), 'b': np.array([2.0])}, 0.01)
    np.testing.assert_allclose(out.array('w'), [0.99, -1.99], rtol=1e-6)
    np.testing.assert_allclose(out.array('b'), [0.49], rtol=1e-6)

def test_missing_gradient_means_zero(f64):
    out = Adam().step(params(), {'w': np.ones(2)}, 0.01)
    assert out.array('b')[0] == 0.5

def test_state_round_trip_continues_identically(f64):
    grads = [{'w': np.array([0.3, -0.2]), 'b': np.array([1.0])}, {'w': np.array([-0.1, 0.4]), 'b': np.array([0.2])}]
    a = Adam()
    p = a.step(params(), grads[0], 0.01)
    b = Adam()
    b.load_state(*a.state())
    np.testing.assert_array_equal(a.step(p, grads[1], 0.01).array('w'), b.step(p, grads[1], 0.01).array('w'))

def test_moments_are_kept_per_collection(f64):
    opt = Adam()
    opt.step(params(), {'w': np.ones(2), 'b': np.ones(1)}, 0.01)
    opt.step(ParamSet('q', {'v': np.ones(3)}), {'v': np.ones(3)}, 0.01)
    sets, steps = opt.state()
    assert steps == {'p': 1, 'q': 1}
    assert set(sets) == {'adam_m.p', 'adam_v.p', 'adam_m.q', 'adam_v.q'}

def test_non_finite_update_is_an_error(f64):
    opt = Adam()
    with pytest.raises(Errors.NumericalError) as info:
        opt.step(params(), {'w': np.array([np.nan, 0.0]), 'b': np.zeros(1)}, 0.01)
    assert info.value.context == {'params': 'p', 'step': 1}
