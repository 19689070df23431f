"""
Errors - exception hierarchy shared by every module
异常层级与 CLI 退出码
"""

from typing import Optional


class SkmError(Exception):
    """Base error; anything not more specific is an internal failure."""

    exit_code = 3


class UsageError(SkmError):
    """Bad command-line usage or flag combination."""

    exit_code = 1


class ModelValidationError(SkmError, ValueError):
    """Data or model failed validation."""

    exit_code = 2


class HazardOverflowError(ModelValidationError):
    """Total event hazard exceeded 1 at some timestep."""

    def __init__(
        self,
        t: int,
        event_id: Optional[int] = None,
        total: Optional[float] = None,
        individual: Optional[int] = None,
        hint: str = "",
    ):
        self.t = t
        self.event_id = event_id
        self.total = total
        self.individual = individual
        parts = [f"hazard overflow at t={t}"]
        if event_id is not None:
            parts.append(f"event={event_id}")
        if individual is not None:
            parts.append(f"individual={individual}")
        if total is not None:
            parts.append(f"total={total:.6g}")
        message = ", ".join(parts)
        if hint:
            message = f"{message} ({hint})"
        super().__init__(message)


class UnknownEventError(ModelValidationError):
    """Event id not defined at the requested timestep."""

    def __init__(self, t: int, event_id: int):
        self.t = t
        self.event_id = event_id
        super().__init__(f"unknown event id {event_id} at t={t}")


class StateSpaceTooLargeError(ModelValidationError):
    """Joint state space exceeds the exact-inference cap."""

    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(f"joint state space {size} exceeds cap {cap}")


class DataFormatError(ModelValidationError):
    """Malformed input record; carries the file and line number."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class WeightCollapseError(ModelValidationError):
    """Every particle received zero weight."""

    def __init__(self, t: int):
        self.t = t
        super().__init__(f"particle weights collapsed at t={t}")


class EvaluationError(ModelValidationError):
    """Metric undefined for the given input."""
