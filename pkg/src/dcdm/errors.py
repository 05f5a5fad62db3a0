"""Exception types shared across the package."""


class DcdmError(Exception):
    """Base class for all package errors."""


class ShapeError(DcdmError):
    """Operands have incompatible shapes; the message names both shapes."""


class NumericError(DcdmError):
    """A public operation produced or encountered NaN/Inf."""


class DecodeError(DcdmError):
    """Image bytes could not be decoded, or the format is unsupported."""


class DatasetError(DcdmError):
    """Dataset directory, manifest, or split request is invalid."""


class WeightFormatError(DcdmError):
    """Weight file is corrupt, truncated, or inconsistent with the model."""
