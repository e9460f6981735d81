"""
Exception hierarchy for the ID pruning toolkit.
Every error raised on purpose by the toolkit derives from IdPruneError so the
CLI can report it uniformly.
"""


class IdPruneError(Exception):
    """Base class for toolkit errors."""


class InvalidInputError(IdPruneError, ValueError):
    """Non-finite data, invalid criteria or out-of-range parameters."""


class RankDeficiencyError(IdPruneError, ArithmeticError):
    """R11 is numerically singular for the requested rank."""

    def __init__(self, requested_rank, numerical_rank):
        self.requested_rank = requested_rank
        self.numerical_rank = numerical_rank
        super().__init__(
            f"R11 is numerically singular at k={requested_rank} "
            f"(numerical rank {numerical_rank}); lower k to at most {numerical_rank}"
        )


class ShapeError(IdPruneError, ValueError):
    """Tensor shapes do not agree with a layer."""


class StructuralError(IdPruneError):
    """The model topology does not allow the requested transformation."""


class DataFormatError(IdPruneError):
    """A data or model file is malformed."""


class TrainingError(IdPruneError, RuntimeError):
    """Training diverged or could not proceed."""


class ConfigError(IdPruneError):
    """The run configuration is invalid."""
