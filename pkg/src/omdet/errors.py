"""Shared exception types."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class NumericError(ArithmeticError):
    """A forward pass or training step produced non-finite values."""


class DegeneracyError(ValueError):
    """Orthogonalization hit a (numerically) linearly dependent input row."""


class DatasetFormatError(IOError):
    """On-disk dataset is unreadable; ``code`` distinguishes the failure.

    Codes: ``bad_magic``, ``version_mismatch``, ``truncated``, ``checksum``,
    ``missing_file``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
