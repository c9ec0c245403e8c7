"""Exception types raised across the package."""


class DualTaskError(Exception):
    """Base class for all package errors."""


class ShapeError(DualTaskError, ValueError):
    pass


class DegenerateBatchError(DualTaskError, ValueError):
    """Train-mode batch normalization needs at least two rows."""


class UndefinedSimilarityError(DualTaskError, ValueError):
    """Cosine similarity of a zero-norm vector."""


class TrainingDivergenceError(DualTaskError, FloatingPointError):
    pass


class EmptyInputError(DualTaskError, ValueError):
    pass


class EmptyQueryError(EmptyInputError):
    """A query produced no in-vocabulary tokens."""


class EmptyConceptQueryError(EmptyQueryError):
    """A query produced no concept indices; callers fall back to embedding search."""


class EmptyVocabularyError(DualTaskError, ValueError):
    pass


class NoNegativesError(DualTaskError, ValueError):
    pass


class UndefinedMetricError(DualTaskError, ValueError):
    pass


class ParseError(DualTaskError, ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class FormatError(DualTaskError, ValueError):
    """Malformed or mismatched on-disk file."""
