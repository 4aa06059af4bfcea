"""Exception types shared across the package."""


class DtrsizeError(Exception):
    """Base class for all package errors."""


class SchemaError(DtrsizeError):
    """Input file header or declared dimensions do not match the expected layout."""


class RowParseError(DtrsizeError):
    """A data row failed validation; message names the row and column."""

    def __init__(self, row: int, column: str, reason: str):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column}: {reason}")


class SingularMatrixError(DtrsizeError):
    """Weighted cross-product matrix is singular or too ill-conditioned to solve."""

    def __init__(self, condition_estimate: float):
        self.condition_estimate = condition_estimate
        super().__init__(
            f"singular or ill-conditioned system (condition estimate {condition_estimate:.3e})"
        )


class DegenerateLabelsError(DtrsizeError):
    """Logistic fit requested with only one label class present."""


class SeparationError(DtrsizeError):
    """Logistic fit diverged; the data are (quasi-)separated."""


class PositivityError(DtrsizeError):
    """A propensity of exactly 0 or 1 was passed where a weight is undefined."""


class DegenerateResampleError(DtrsizeError):
    """Bootstrap resampling kept producing unusable datasets after the retry budget."""


class ConfigError(DtrsizeError):
    """A run configuration is malformed or inconsistent."""
