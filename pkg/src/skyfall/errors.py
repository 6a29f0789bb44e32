"""Exception taxonomy shared across the package.

Exit-code mapping for the CLI: usage errors exit 2 (argparse), DataError and
subclasses exit 3, OracleError/RefinerError exit 4.
"""


class SkyfallError(Exception):
    """Base class for all package errors."""


class ParameterError(SkyfallError, ValueError):
    """An argument is outside its mathematical domain (e.g. non-unit quaternion)."""


class ContractError(SkyfallError, ValueError):
    """Caller violated an interface contract (shape/dimension mismatch, bad range)."""


class DataError(SkyfallError):
    """On-disk data is missing, malformed, or inconsistent."""


class PlyParseError(DataError):
    """Malformed splat-PLY file. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BundleError(DataError):
    """Scene bundle could not be read or written."""


class BundleChecksumError(BundleError):
    """Stored payload checksum does not match the payload bytes."""


class BundleVersionError(BundleError):
    """Bundle was written by an unknown (future) format version."""


class OracleError(SkyfallError):
    """A depth oracle failed to produce an estimate."""


class RefinerError(SkyfallError):
    """The image refiner backend failed. Carries partial-progress information."""

    def __init__(self, message: str, completed: int = 0, total: int = 0):
        super().__init__(message)
        self.completed = completed
        self.total = total


class TrainingDiverged(SkyfallError):
    """A parameter became NaN/Inf during optimization; names the parameter class."""
