"""
Structured errors shared by the engine and the command line.
"""


class ScaError(Exception):
    """Base error. Carries a stable code and the process exit code the CLI uses."""

    code = 'error'
    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        result = {
            'success': False,
            'error': self.code,
            'message': self.message
        }
        result.update(self.details)
        return result


class ShapeError(ScaError):
    code = 'shape_mismatch'


class NumericalError(ScaError):
    code = 'non_finite'


class TraceError(ScaError):
    code = 'trace_error'


class ConfigError(ScaError):
    code = 'invalid_config'
    exit_code = 2


class ArchitectureError(ConfigError):
    code = 'invalid_architecture'


class InfeasiblePruneError(ScaError):
    code = 'infeasible_prune'
    exit_code = 3


class StorageError(ScaError):
    code = 'io_error'
    exit_code = 4


class CorruptContainerError(StorageError):
    code = 'corrupt_container'


class RunExistsError(ScaError):
    code = 'run_exists'
    exit_code = 5


class RunLockedError(ScaError):
    code = 'run_locked'
    exit_code = 5


class IncompleteRunError(ScaError):
    code = 'incomplete_run'
    exit_code = 6


class SpikeError(ScaError):
    code = 'non_binary_spikes'
