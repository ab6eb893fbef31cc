# ddprune/errors.py
"""
Error taxonomy shared by every module.

Messages start with the name of the failing operation, e.g.
``StructuralError("grad_inner: expected 67 parameters, got 66")``.
"""
from __future__ import annotations


class DistillError(Exception):
    """Base class for every error raised by ddprune."""


class InputDomainError(DistillError, ValueError):
    pass


class StructuralError(DistillError, ValueError):
    pass


class ConfigError(DistillError, ValueError):
    pass


class FormatError(DistillError, ValueError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = int(offset)


class NumericError(DistillError, ArithmeticError):
    """Non-finite value; records where in the run it appeared."""

    def __init__(self, message: str, *, step: int | None = None,
                 teacher: int | None = None, epoch: int | None = None) -> None:
        where = []
        if teacher is not None:
            where.append(f"teacher={teacher}")
        if epoch is not None:
            where.append(f"epoch={epoch}")
        if step is not None:
            where.append(f"step={step}")
        super().__init__(message + (f" [{', '.join(where)}]" if where else ""))
        self.step = step
        self.teacher = teacher
        self.epoch = epoch


class DegenerateMaskError(NumericError):
    pass


# CLI exit codes
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, FormatError, FileNotFoundError)):
        return EXIT_USAGE
    return EXIT_INTERNAL
