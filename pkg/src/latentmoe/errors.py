"""Exception hierarchy shared by the library and the CLI.

Each class carries the CLI exit code it maps to, so ``cli.main`` can turn any
library failure into the documented exit status without a lookup table.
"""

from __future__ import annotations


class LatentMoeError(Exception):
    exit_code = 1


class ArgumentError(LatentMoeError, ValueError):
    """Invalid shapes, ranks, indices or options."""

    exit_code = 1


class StateError(LatentMoeError, RuntimeError):
    """Operation called without the state it needs (e.g. backward before forward)."""

    exit_code = 1


class NumericalError(LatentMoeError, ArithmeticError):
    exit_code = 3


class NotPositiveDefiniteError(NumericalError):
    """Cholesky failed; the caller is expected to regularize and retry."""


class FormatError(LatentMoeError):
    """Base for container read failures. ``offset`` is the byte position involved."""

    exit_code = 2

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class VerificationError(LatentMoeError):
    exit_code = 4
