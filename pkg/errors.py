from typing import Optional


class GmaeError(RuntimeError):
    """Base class for every error raised by the toolkit. `exit_code` is what the CLI returns."""

    exit_code = 1


class DimensionError(GmaeError):
    """Matrix shapes do not conform for an operation."""


class DomainError(GmaeError):
    """A value lies outside an operation's mathematical domain (log of <= 0, zero vector)."""


class ContractError(GmaeError):
    """A caller broke an interface contract (non-scalar backward, mismatched grads)."""


class ConfigError(GmaeError):
    exit_code = 1


class IngestionError(GmaeError):
    exit_code = 2


class ParseError(IngestionError):
    def __init__(self, path: str, row: int, column: str, value: str):
        self.path = path
        self.row = row
        self.column = column
        self.value = value
        super().__init__(
            f"non-numeric cell in {path} at row {row}, column {column!r}: {value!r}"
        )


class ValidationError(IngestionError):
    pass


class ProtocolError(GmaeError):
    """The missing-view protocol cannot be applied (e.g. a single-view dataset)."""

    exit_code = 2


class TrainingError(GmaeError):
    exit_code = 3

    def __init__(self, component: str, epoch: int, value: Optional[float] = None):
        self.component = component
        self.epoch = epoch
        self.value = value
        super().__init__(f"non-finite {component} loss at epoch {epoch}: {value}")
