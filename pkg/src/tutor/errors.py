"""Exception hierarchy shared by every stage of the pipeline."""


class TutorError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(TutorError):
    pass


class MissingColumn(TutorError):
    pass


class UnknownCategoryLevel(TutorError):
    def __init__(self, row, column, value):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"row {row}, column {column!r}: unknown level {value!r}")


class ParseError(TutorError):
    pass


class ResultTooSmall(TutorError):
    pass


class InvalidCompression(TutorError):
    pass


class DimensionMismatch(TutorError):
    pass


class CholeskyFailure(TutorError):
    pass


class NonFiniteLoss(TutorError):
    pass


class TestLeakage(TutorError):
    __test__ = False  # keep pytest from collecting this as a test class


class ConfigError(TutorError):
    pass


class StageFailure(TutorError):
    def __init__(self, stage, cause):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class RetryBudgetExhausted(TutorError, UserWarning):
    """Issued as a warning: generation stopped early and returned a partial batch."""
