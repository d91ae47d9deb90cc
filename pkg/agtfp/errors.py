"""Exception hierarchy shared by every stage.

Library code raises these; only the CLI maps them to exit codes.
"""

from __future__ import annotations

from typing import Any


class AgtfpError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for this failure."""

    exit_code = 3
    kind = "error"

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"error": self.kind, "message": self.message}
        for key, value in self.details.items():
            out[key] = value if isinstance(value, (str, int, float, bool)) or value is None else str(value)
        return out


class ConfigError(AgtfpError):
    exit_code = 1
    kind = "config"

    def __init__(self, message: str, key: str | None = None, **details: Any) -> None:
        super().__init__(message, key=key, **details)
        self.key = key


class DataValidationError(AgtfpError):
    exit_code = 2
    kind = "data"


class ParseError(DataValidationError):
    kind = "parse"

    def __init__(self, message: str, path: str | None = None, line: int | None = None) -> None:
        super().__init__(message, path=path, line=line)
        self.line = line


class DomainError(DataValidationError):
    kind = "domain"


class CoverageError(DataValidationError):
    kind = "coverage"

    def __init__(self, message: str, missing: list[tuple[str, int]] | None = None) -> None:
        self.missing = list(missing or [])
        super().__init__(message, n_missing=len(self.missing))

    def to_dict(self) -> dict[str, Any]:
        out = super().to_dict()
        out["missing"] = [f"{c}:{y}" for c, y in self.missing[:50]]
        return out


class NumericalError(AgtfpError):
    exit_code = 3
    kind = "numerical"


class RankDeficientError(NumericalError):
    kind = "rank"

    def __init__(self, columns: list[str]) -> None:
        self.columns = list(columns)
        super().__init__(
            f"design is rank deficient after fixed-effect absorption; collinear columns: {', '.join(self.columns) or '<none named>'}",
            columns=",".join(self.columns),
        )


class ConvergenceError(NumericalError):
    kind = "convergence"


class SweepFailure(NumericalError):
    kind = "sweep"
