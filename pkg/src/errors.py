"""
Error types raised across the IDM-Follower pipeline.

Every error subclasses a builtin so callers that already catch
ValueError or RuntimeError keep working.
"""

from typing import Optional


class ConfigurationError(ValueError):
    """Invalid configuration values or unknown configuration keys."""


class TrajectoryError(ValueError):
    """A trajectory, pair or window violates its invariants."""


class TrajectoryParseError(TrajectoryError):
    """Malformed row in a trajectory CSV file."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class CollisionError(ValueError):
    """Gap between leader and follower reached zero or below."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (index {index})")
        self.index = index


class ShapeError(ValueError):
    """Tensor operands with incompatible shapes."""


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible model checkpoint."""


class ScenarioError(ValueError):
    """Infeasible lead profile or rejected simulation scenario."""


class CalibrationError(RuntimeError):
    """IDM calibration could not evaluate a single feasible parameter set."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, batch: Optional[int] = None):
        where = f"epoch {epoch}" if batch is None else f"epoch {epoch}, batch {batch}"
        super().__init__(f"{message} ({where})")
        self.epoch = epoch
        self.batch = batch
