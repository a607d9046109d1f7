"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
MissingArtifactError -> 4, everything else -> 1.
"""


class PairflowError(Exception):
    """Base class for all package errors."""


class ValidationError(PairflowError):
    """A domain object violates one of its invariants."""


class ShapeError(PairflowError):
    """Array shapes are inconsistent with the operation's contract."""


class VocabularyError(PairflowError):
    """A caption word is not in the closed vocabulary."""


class GenerationError(PairflowError):
    """Rejection sampling failed to produce a valid sample."""


class NumericError(PairflowError):
    """Non-finite values or divergence encountered."""


class ConfigError(PairflowError):
    """Invalid or unknown configuration."""


class CheckpointError(PairflowError):
    """Checkpoint store is missing, corrupt, or inconsistent."""


class DegenerateMaskError(PairflowError):
    """A local edit pair produced an empty edit mask."""


class ContractError(PairflowError):
    """A required input (e.g. a ground-truth mask) is missing."""


class MissingArtifactError(PairflowError):
    """A referenced run artifact (checkpoint, corpus, report) does not exist."""
