"""Exception hierarchy shared by all planner modules.

Every domain failure carries the process exit code the CLI reports for it.
"""

from typing import Any, Optional


class PlannerError(Exception):
    """Base class for domain failures."""

    exit_code: int = 1


class ConfigError(PlannerError):
    """Invalid configuration file or flag combination."""

    exit_code = 2


class DataError(PlannerError):
    """Malformed dataset, CSV, or trace file."""

    exit_code = 3


class CheckpointError(PlannerError):
    """Unreadable checkpoint file or bundle."""

    exit_code = 3


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint is truncated or structurally invalid."""


class ChecksumError(CheckpointError):
    """Stored checksum does not match the payload."""


class IncompatibleCheckpointError(PlannerError):
    """Components were trained against different world models."""

    exit_code = 4


class DivergenceError(PlannerError):
    """A loss, gradient or activation became non-finite."""

    exit_code = 5

    def __init__(self, message: str, diagnostics: Optional[dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IntegrationError(PlannerError):
    """Adaptive ODE integration could not make progress."""

    exit_code = 6

    def __init__(self, message: str, last_state: Any = None, last_time: float = 0.0):
        super().__init__(message)
        self.last_state = last_state
        self.last_time = last_time


class MazeError(PlannerError):
    """Invalid use of the maze environment."""

    exit_code = 1


class EstimationError(PlannerError):
    """A Monte Carlo estimate stayed too noisy at the sample cap."""

    exit_code = 1
