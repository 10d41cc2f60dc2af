"""Mean teacher: an exponential moving average of the segmenter."""
from dataclasses import dataclass

import numpy as np

from . import Errors
from .Nets import ParamSet

@dataclass
class TeacherState:
    params: ParamSet
    beta: float = 0.99
    step_count: int = 0

def ema_init(student, beta=0.99):
    """Teacher starts as an exact copy of the student."""
    if not 0.0 <= beta <= 1.0:
        raise Errors.ConfigError('EMA beta must lie in [0, 1]', context={'beta': beta})
    params = student.copy()
    params.name = 'teacher'
    return TeacherState(params=params, beta=beta, step_count=0)

def ema_update(teacher, student):
    """teacher <- beta * teacher + (1 - beta) * student, elementwise."""
    teacher.params.check_compatible(student)
    beta = teacher.beta
    values = {}
    for key in teacher.params.keys():
        old = teacher.params.array(key)
        new = np.asarray(student.array(key), dtype=old.dtype)
        values[key] = beta * old + (1.0 - beta) * new
    params = ParamSet(teacher.params.name, values, teacher.params.meta)
    return TeacherState(params=params, beta=beta, step_count=teacher.step_count + 1)
