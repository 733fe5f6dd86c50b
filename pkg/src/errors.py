from __future__ import annotations

from typing import Optional


class SpatioTempError(Exception):
    """Base class for every error raised by the toolkit."""


class EmptyAfterFilter(SpatioTempError):
    pass


class DuplicateKey(SpatioTempError):
    pass


class UnknownStation(SpatioTempError):
    pass


class DegenerateGeometry(SpatioTempError):
    pass


class PointOutsideMesh(SpatioTempError):
    def __init__(self, index: int, point: Optional[tuple] = None):
        self.index = int(index)
        self.point = point
        where = f" at {point}" if point is not None else ""
        super().__init__(f"point {self.index}{where} lies outside the mesh")


class NotPositiveDefinite(SpatioTempError):
    def __init__(self, pivot: Optional[int] = None, message: str = ""):
        self.pivot = pivot
        text = message or "matrix is not positive definite"
        if pivot is not None:
            text = f"{text} (pivot {pivot})"
        super().__init__(text)


class DimensionMismatch(SpatioTempError):
    pass


class NonFinite(SpatioTempError):
    pass


class UnseenDay(SpatioTempError):
    def __init__(self, day):
        self.day = day
        super().__init__(f"day {self.day} was not observed in training")


class BadK(SpatioTempError):
    pass


class EmptyTrainSet(SpatioTempError):
    pass


class DegenerateResponse(SpatioTempError):
    pass


class TooLarge(SpatioTempError):
    pass


class SchemaError(SpatioTempError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(column)


class ParseError(SpatioTempError):
    def __init__(self, line: int, message: str):
        self.line = int(line)
        super().__init__(f"line {self.line}: {message}")


class ConfigError(SpatioTempError):
    pass


class PlanMismatch(SpatioTempError):
    pass


class FoldError(SpatioTempError):
    def __init__(self, fold: int, cause: Exception):
        self.fold = int(fold)
        self.cause = cause
        super().__init__(f"fold {self.fold}: {type(cause).__name__}: {cause}")


class InvalidSplit(SpatioTempError):
    pass
