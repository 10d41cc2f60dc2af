"""JSON run configuration: synthetic data, trainer and paths.

Every key is optional; unknown keys are rejected at any nesting level.
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from . import Errors
from .Engine import TrainerConfig
from .Losses import ScheduleConfig
from .SynthData import SynthConfig

RUN_DIR_ENV = 'METAHAL_RUN_DIR'

@dataclass
class PathsConfig:
    data_dir: str = 'data'
    run_dir: str = 'runs/default'

@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

NESTED = {
    (RunConfig, 'synth'): SynthConfig,
    (RunConfig, 'trainer'): TrainerConfig,
    (RunConfig, 'paths'): PathsConfig,
    (TrainerConfig, 'schedule'): ScheduleConfig,
}

def _build(cls, data, where):
    if not isinstance(data, dict):
        raise Errors.ConfigError('Expected an object', context={'section': where or 'root'})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise Errors.ConfigError('Unknown configuration keys', context={'section': where or 'root',
                                                                        'keys': ', '.join(unknown)})
    kwargs = {}
    for key, value in data.items():
        sub = NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, (where + '.' if where else '') + key) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as ex:
        raise Errors.ConfigError('Invalid configuration: {}'.format(ex), context={'section': where or 'root'})

def from_dict(data):
    return _build(RunConfig, data, '')

def loads(text):
    try:
        data = json.loads(text)
    except ValueError as ex:
        raise Errors.ConfigError('Config is not valid JSON: {}'.format(ex))
    return from_dict(data)

def load(path=None):
    """Parses the config file at `path`, or the defaults when no path is given."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            return loads(f.read())
    except OSError as ex:
        raise Errors.ConfigError('Cannot read config: {}'.format(ex), context={'path': path})

def resolve_run_dir(cfg, override=None):
    """--out beats the environment variable, which beats the config file."""
    return override or os.environ.get(RUN_DIR_ENV) or cfg.paths.run_dir

def echo(cfg, run_dir):
    """Writes the effective config into the run directory."""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, 'config.json')
    with open(path, 'w') as f:
        f.write(cfg.to_json() + '\n')
    return path

def replace(cfg, **sections):
    """Copy of `cfg` with keys overridden per section, e.g. replace(cfg, trainer={'mode': 'mt'})."""
    data = cfg.to_dict()
    for section, values in sections.items():
        if not is_dataclass(getattr(cfg, section, None)):
            raise Errors.ConfigError('Unknown configuration section', context={'section': section})
        data[section].update(values)
    return from_dict(data)
