import sys

class ExitCode:
    Ok = 0
    UsageError = 1
    NumericalAbort = 2

class Logger:
    INFO = 1
    WARN = 2
    DEBUG = 3
    def __init__(self, log_level=WARN, stream=None):
        self.log_level = log_level
        self.stream = stream

    def _write(self, tag, msg):
        stream = self.stream or sys.stderr
        stream.write('[{}] {}\n'.format(tag, ' '.join(map(str, msg))))

    def info(self, *msg):
        if self.log_level >= Logger.INFO:
            self._write('INFO', msg)

    def warn(self, *msg):
        if self.log_level >= Logger.WARN:
            self._write('WARNING', msg)

    def debug(self, *msg):
        if self.log_level >= Logger.DEBUG:
            self._write('DEBUG', msg)

class MetaHalError(Exception):
    def __init__(self, msg, context=None):
        self.context = dict(context or {})
        if self.context:
            lines = '\n'.join('  {}={}'.format(key, value) for key, value in self.context.items())
            msg = msg + '\n' + lines
        super().__init__(msg)

class ShapeError(MetaHalError):
    pass

class BackwardError(MetaHalError):
    pass

class NumericalError(MetaHalError):
    """Non-finite values or divergence; `context` holds the diagnostic snapshot."""
    pass

class LabelError(MetaHalError):
    pass

class ConfigError(MetaHalError):
    pass

class DatasetFormatError(MetaHalError):
    pass

class CheckpointError(MetaHalError):
    pass

class SynthError(MetaHalError):
    pass

class MetricError(MetaHalError):
    def __init__(self, msg, class_id=None, context=None):
        self.class_id = class_id
        context = dict(context or {})
        if class_id is not None:
            context.setdefault('class_id', class_id)
        super().__init__(msg, context=context)

class VerificationError(MetaHalError):
    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__('Violated invariants:\n' + '\n'.join('- ' + f for f in self.failures))
