from __future__ import annotations

from typing import Optional

__all__ = (
    'MergeToolkitError',
    'ShapeError',
    'ContractError',
    'SingularityError',
    'CapacityError',
    'FormatError',
    'MergeabilityError',
    'DivergenceError',
    'ConfigError',
    'NumericalError',
    'ObjectiveError',
    'SpecError',
    'StatsError',
    'StageError',
    'UsageError',
)


class MergeToolkitError(Exception):
    """
    Base class for every error raised by *subspace-merging*.

    Each subclass also inherits the builtin exception whose contract it refines, so
    `except ValueError` keeps working for callers that don't care about the details.
    """


class ShapeError(MergeToolkitError, ValueError):
    pass


class ContractError(MergeToolkitError, ValueError):
    pass


class SingularityError(MergeToolkitError, ArithmeticError):
    def __init__(self, message: str, *, layer: Optional[str] = None):
        self.layer = layer
        super().__init__(message if layer is None else f'{message} (layer {layer!r})')


class CapacityError(MergeToolkitError, ValueError):
    def __init__(self, message: str, *, requested: int, cap: int):
        self.requested = requested
        self.cap = cap
        super().__init__(f'{message}: {requested:,} exceeds cap of {cap:,}')


class FormatError(MergeToolkitError, ValueError):
    def __init__(self, message: str, *, offset: int):
        self.offset = offset
        super().__init__(f'{message} at offset {offset}')


class MergeabilityError(MergeToolkitError, ValueError):
    def __init__(self, message: str, *, name: str):
        self.name = name
        super().__init__(message)


class DivergenceError(MergeToolkitError, ArithmeticError):
    def __init__(self, message: str, *, step: int):
        self.step = step
        super().__init__(f'{message} at step {step}')


class ConfigError(MergeToolkitError, ValueError):
    pass


class NumericalError(MergeToolkitError, ArithmeticError):
    def __init__(self, message: str, *, iteration: int):
        self.iteration = iteration
        super().__init__(f'{message} at iteration {iteration}')


class ObjectiveError(MergeToolkitError, ValueError):
    def __init__(self, message: str, *, param: str, statistic: Optional[str] = None):
        self.param = param
        self.statistic = statistic
        super().__init__(message)


class SpecError(MergeToolkitError, ValueError):
    pass


class StatsError(MergeToolkitError, ValueError):
    pass


class StageError(MergeToolkitError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f'stage {stage!r} failed: {cause}')


class UsageError(MergeToolkitError, ValueError):
    pass
