"""Exception hierarchy shared by every subsystem.

Each class carries the CLI exit code it maps to so the entry point can stay
a thin dispatcher.
"""


class TinyDLMError(Exception):
    exit_code = 1


class ConfigError(TinyDLMError, ValueError):
    exit_code = 2


class DataError(TinyDLMError, ValueError):
    exit_code = 3


class CorpusError(DataError):
    """Raised by tokenization / collation. ``indices`` lists offending rows."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class NumericError(TinyDLMError, ArithmeticError):
    exit_code = 4


class TrainingAborted(NumericError):
    def __init__(self, message, step=None, digest=None):
        super().__init__(message)
        self.step = step
        self.digest = digest


class BackboneError(TinyDLMError, ValueError):
    exit_code = 2


class CheckpointError(TinyDLMError, IOError):
    """Checkpoint validation failure; ``field`` names what disagreed."""

    exit_code = 5

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class LossError(TinyDLMError, ValueError):
    exit_code = 4


class SamplerError(ConfigError):
    pass


class VisualizerError(DataError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EvalError(DataError):
    pass
