"""Exception types raised across the package."""


class FundusFuseError(Exception):
    pass


class ConfigError(FundusFuseError):
    pass


class DataError(FundusFuseError):
    pass


class MissingFile(DataError, FileNotFoundError):
    pass


class SchemaError(DataError):
    """Manifest or template table does not match the expected layout."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class DecodeError(DataError):
    pass


class UnknownLabel(DataError, KeyError):
    pass


class EmptySplit(DataError):
    pass


class InvalidRatios(DataError, ValueError):
    pass


class ModelError(FundusFuseError):
    pass


class ShapeError(ModelError, ValueError):
    pass


class DimensionMismatch(ModelError, ValueError):
    pass


class AllModalitiesAbsent(ModelError):
    pass


class MissingModality(ModelError):
    pass


class NonFiniteInput(ModelError, ValueError):
    pass


class LengthOverflow(ModelError, ValueError):
    pass


class LossError(FundusFuseError, ValueError):
    pass


class NotNormalized(LossError):
    pass


class ShapeMismatch(LossError):
    pass


class EmptyMask(LossError):
    pass


class LabelOutOfRange(LossError):
    pass


class NonFiniteComponent(LossError):
    pass


class TrainingError(FundusFuseError):
    pass


class NonFiniteLoss(TrainingError):
    pass


class EmptyDataset(TrainingError):
    pass


class CheckpointError(FundusFuseError):
    pass


class IncompatibleConfig(CheckpointError):
    pass


class KOutOfRange(FundusFuseError, ValueError):
    pass
