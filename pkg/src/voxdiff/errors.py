"""Exception types shared across the package."""


class VoxdiffError(Exception):
    """Base class for all package errors."""


class ConfigError(VoxdiffError):
    """Invalid or inconsistent configuration."""


class ShapeError(VoxdiffError):
    """Tensor/volume shape or channel mismatch."""


class DegenerateIntensityRange(VoxdiffError):
    """min-max normalization requested on a constant volume."""


class PatchOutOfBounds(VoxdiffError):
    """Patch specification does not fit inside the parent volume."""


class ParseError(VoxdiffError):
    """Base class for binary file parsing failures."""


class BadMagic(ParseError):
    """File does not start with the expected magic bytes."""


class TruncatedPayload(ParseError):
    """File ends before the declared payload is complete."""


class HeaderMismatch(ParseError):
    """Header fields are internally inconsistent or unsupported."""


class NonFiniteGradient(VoxdiffError):
    """A NaN/Inf gradient was produced during training."""


class CheckpointMismatch(VoxdiffError):
    """Checkpoint contents do not match the current model configuration."""
