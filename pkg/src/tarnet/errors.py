"""Exception hierarchy shared by every tarnet module.

The CLI maps these onto its exit codes: configuration problems exit 2,
data/format problems exit 3 and numeric failures exit 4.
"""


class TarError(Exception):
    """Base class for all library errors."""


class ConfigError(TarError, ValueError):
    """A configuration or precondition was violated."""


class ContractError(TarError, ValueError):
    """An operation was called with arguments that break its contract."""


class ShapeError(ContractError):
    pass


class DegenerateVarianceError(ContractError):
    pass


class GradientError(TarError, RuntimeError):
    """Misuse of the reverse-mode tape."""


class MissingGradientError(GradientError):
    pass


class FormatError(TarError, ValueError):
    """A file on disk could not be parsed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class NumericError(TarError, FloatingPointError):
    """NaN or Inf appeared where only finite values are allowed."""
