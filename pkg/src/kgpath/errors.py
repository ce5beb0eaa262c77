"""Exception types shared across the toolkit."""


class KgPathError(Exception):
    """Base class for all toolkit errors."""


class ParseError(KgPathError):
    """A data file line could not be parsed."""


class VocabularyError(KgPathError):
    """A name or id does not resolve in the vocabulary."""


class GraphIndexError(KgPathError):
    """A triple refers to an id outside the graph's valid ranges."""


class TaskError(KgPathError):
    """Records incompatible with the requested training task."""


class CheckpointError(KgPathError):
    """A checkpoint file is missing, truncated, or inconsistent."""


class NumericError(KgPathError):
    """A non-finite value appeared in an activation or gradient."""


class DivergenceError(KgPathError):
    """Training loss became non-finite.

    Carries the path of the last checkpoint written before the blow-up,
    or None if no checkpoint had been saved yet.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class ValidationError(KgPathError):
    """An input file violates its format contract."""
