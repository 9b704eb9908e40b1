"""Exception types raised across the package."""


class BlobError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(BlobError, ValueError):
    pass


class NonPositiveVariance(BlobError, ValueError):
    pass


class NonPositivePhi(BlobError, ValueError):
    pass


class SingularPrecision(BlobError, ValueError):
    pass


class CalibrationFailed(BlobError, RuntimeError):
    pass


class EmptyDataset(BlobError, ValueError):
    pass


class ItemIdOutOfRange(BlobError, ValueError):
    pass


class DegenerateLabels(BlobError, ValueError):
    pass


class MissingPropensity(BlobError, ValueError):
    pass


class SessionTooShort(BlobError, ValueError):
    pass


class InvalidConfig(BlobError, ValueError):
    """Configuration failed validation; ``errors`` maps field paths to messages."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = {"config": errors}
        self.errors = dict(errors)
        msg = "; ".join(f"{k}: {v}" for k, v in self.errors.items())
        super().__init__(msg)


class MissingInput(BlobError, FileNotFoundError):
    pass


class TrainingDiverged(BlobError, FloatingPointError):
    pass


class FormatVersionMismatch(BlobError, ValueError):
    pass
