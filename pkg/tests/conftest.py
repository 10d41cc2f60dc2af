import numpy as np
import pytest

from MetaHal import Engine
from MetaHal.Errors import Logger
from MetaHal.Losses import ScheduleConfig
from MetaHal.SynthData import SynthConfig
from MetaHal.Tensor import precision

@pytest.fixture
def rng():
    return np.random.default_rng(0)

@pytest.fixture
def f64():
    with precision(64):
        yield

@pytest.fixture
def logger():
    return Logger(log_level=0)

def small_synth(**overrides):
    values = dict(size=32, shots=2, n_unlabeled_source=2, n_target=6, n_target_test=2)
    values.update(overrides)
    return SynthConfig(**values)

def small_trainer(mode='full', **overrides):
    values = dict(mode=mode, epochs=2, n_train_pairs=4, n_test_pairs=2, labeled_batch=2, augmented_batch=2,
                  unlabeled_batch=4, depth=2, base_channels=4, eval_batch=4, checkpoint_every=1,
                  schedule=ScheduleConfig(horizon=2, warmup_epochs=1))
    values.update(overrides)
    return Engine.TrainerConfig(**values)

@pytest.fixture(scope='session')
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('bench')
    Engine.write_benchmark(small_synth(), 0, str(out))
    return str(out)

@pytest.fixture(scope='session')
def bench(bench_dir):
    return Engine.load_benchmark(bench_dir)
