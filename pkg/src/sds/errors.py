"""Exception hierarchy.

Every error raised by the library derives from :class:`SdsError`. The CLI maps
the three families below onto exit codes: configuration problems (1), data and
format problems (2) and numeric failures (3).
"""


class SdsError(Exception):
    """Base class. ``layer`` and ``stage`` are filled in by the pipeline."""

    def __init__(self, message: str, *, layer: int | None = None, stage: str | None = None):
        super().__init__(message)
        self.message = message
        self.layer = layer
        self.stage = stage

    def __str__(self) -> str:
        where = []
        if self.stage is not None:
            where.append(f"stage {self.stage}")
        if self.layer is not None:
            where.append(f"layer {self.layer}")
        if where:
            return f"{', '.join(where)}: {self.message}"
        return self.message


def attach_context(err: SdsError, *, layer: int | None = None, stage: str | None = None) -> SdsError:
    if err.layer is None:
        err.layer = layer
    if err.stage is None:
        err.stage = stage
    return err


# configuration / usage
class ConfigError(SdsError, ValueError):
    pass


class PatternError(ConfigError):
    pass


# data / format
class DataError(SdsError):
    pass


class DimensionError(DataError, ValueError):
    pass


class EmptyCalibrationError(DataError, ValueError):
    pass


class ContainerError(DataError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


class InvalidEntryError(ContainerError):
    pass


class BenchmarkMismatchError(DataError):
    pass


# numeric
class NumericError(SdsError, ArithmeticError):
    pass


class NotPositiveDefiniteError(NumericError):
    pass


class IllConditionedError(NumericError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message: str, *, step: int | None = None, **kw):
        super().__init__(message, **kw)
        self.step = step


class NonFiniteError(NumericError):
    pass
