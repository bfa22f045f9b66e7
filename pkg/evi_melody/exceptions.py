from __future__ import annotations

import typing as t

if t.TYPE_CHECKING:
    from evi_melody.checkpoint import Checkpoint


class ConfigError(ValueError):  # noqa: D101
    ...


class DomainError(ValueError):  # noqa: D101
    ...


class GridRangeError(IndexError):  # noqa: D101
    ...


class ArgumentError(ValueError):  # noqa: D101
    ...


class AudioFormatError(ValueError):  # noqa: D101
    ...


class LabelFormatError(ValueError):  # noqa: D101
    ...


class LabelParseError(ValueError):
    """Raised for a malformed label row; `line_no` is 1-based."""

    def __init__(self, message: str, line_no: int) -> None:
        super().__init__(f"Line {line_no}: {message}")
        self.line_no = line_no


class NumericError(ArithmeticError):  # noqa: D101
    ...


class GraphStateError(RuntimeError):  # noqa: D101
    ...


class TrainingDivergedError(NumericError):
    """Raised when the training loss goes non-finite; carries the last good checkpoint & log."""

    def __init__(
        self, message: str, last_good: Checkpoint | None, log: list[dict[str, float]]
    ) -> None:
        super().__init__(message)
        self.last_good = last_good
        self.log = log
