"""Exception hierarchy.

Errors carry a CLI exit-code class: ``ConfigError`` maps to 1, ``DataError``
to 2 and ``NumericError`` to 3.
"""


class CrossmodError(Exception):
    exit_code = 2


class ConfigError(CrossmodError, ValueError):
    exit_code = 1


class DataError(CrossmodError, ValueError):
    exit_code = 2


class NumericError(CrossmodError, ArithmeticError):
    exit_code = 3


# ingest
class MalformedHeader(DataError):
    pass


class UnsupportedMaxval(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class SchemaError(DataError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class ConstraintError(DataError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


# domain / prompts
class UnknownRoute(DataError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


# forge
class WindowTooSmall(DataError):
    def __init__(self, pair_id: str, k: int, available: int, needed: int):
        super().__init__(
            f"pair {pair_id!r} anchor {k}: {available} window candidates, need {needed}"
        )
        self.pair_id = pair_id
        self.k = k


class NoVolumes(DataError):
    pass


class DistractorExhausted(NoVolumes):
    pass


class PoolMissing(DataError):
    def __init__(self, route_id: str):
        super().__init__(f"no description pool for route {route_id!r}")
        self.route_id = route_id


# scoring
class EmptyMask(DataError):
    pass


class UnnormalizedRow(DataError):
    pass


class UnknownInstanceId(DataError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


# metrics / flow / nets
class DimMismatch(DataError):
    pass


class TooSmall(DataError):
    pass


class CountMismatch(DataError):
    pass


class TOutOfRange(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ShapeMismatch(DimMismatch):
    pass


class NonFinite(NumericError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
