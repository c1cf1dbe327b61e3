"""
Exception hierarchy shared by the library and the CLI.
Every class carries the process exit code the CLI returns for it.
"""
from typing import Any, Dict, List, Optional


class GeomortError(Exception):
    exit_code = 1


class DomainError(GeomortError, ValueError):
    """A precondition on the inputs does not hold."""


class SingularDesignError(DomainError):
    def __init__(self, columns: List[str]):
        self.columns = list(columns)
        super().__init__(f"Design matrix is rank deficient; dependent columns: {', '.join(self.columns)}")


class BandwidthError(DomainError):
    pass


class NumericError(GeomortError, ArithmeticError):
    def __init__(self, message: str, layer: Optional[int] = None, coalition: Optional[int] = None):
        self.layer = layer
        self.coalition = coalition
        super().__init__(message)


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, model: Any = None, log: Any = None):
        super().__init__(message)
        self.model = model
        self.log = log


class ConfigError(GeomortError):
    exit_code = 2

    def __init__(self, message: str, errors: Optional[List[str]] = None):
        self.errors = list(errors or [message])
        super().__init__(message)


class DataValidationError(GeomortError):
    exit_code = 3

    def __init__(self, message: str, errors: Optional[List[Dict[str, Any]]] = None):
        # same shape as the bulk-import error list: {"row": n, "error": "..."}
        self.errors = list(errors or [])
        super().__init__(message)

    def describe(self) -> str:
        lines = [str(self)]
        lines += [f"  row {e['row']}: {e['error']}" for e in self.errors]
        return "\n".join(lines)


class FetchError(GeomortError):
    pass


class RetryableFetchError(FetchError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


class CorruptResponseError(FetchError):
    pass


class AuthError(FetchError):
    pass
