"""Exception types shared across the package."""


class DrgnetError(Exception):
    """Base class for all package errors."""


class DimensionError(DrgnetError):
    """Operand shapes do not conform."""


class NumericError(DrgnetError):
    """A kernel produced or received non-finite values."""


class ParseError(DrgnetError):
    """A data file is malformed."""


class SchemaError(DrgnetError):
    """A data file violates the configured schema (e.g. unknown relation)."""


class EmbeddingLookupError(DrgnetError):
    """An embedding provider has no entry for a requested token."""


class ExtractionError(DrgnetError):
    """Subgraph extraction cannot proceed (e.g. no seed entities)."""


class ValidationError(DrgnetError):
    """A config, dataset, or flag combination is invalid."""


class GenerationError(DrgnetError):
    """A synthetic-task spec is infeasible."""


class CheckpointError(DrgnetError):
    """A checkpoint file is missing, corrupt, or incompatible."""
