"""Exception hierarchy for the forcing lab"""

from typing import List, Optional, Sequence, Tuple


class ForcingLabError(Exception):
    """Base class for every error raised by the library."""


class ContractError(ForcingLabError):
    """A precondition or shape contract was violated."""

    def __init__(self, message: str, kind: Optional[str] = None,
                 shapes: Sequence[Tuple[int, ...]] = ()):
        self.kind = kind
        self.shapes = [tuple(s) for s in shapes]
        if kind is not None:
            detail = ", ".join(str(s) for s in self.shapes)
            message = f"{kind}: {message} (shapes: {detail})"
        super().__init__(message)


class NumericError(ForcingLabError):
    """A forward op produced NaN or Inf."""

    def __init__(self, message: str, kind: Optional[str] = None):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if kind else message)


class DataError(ForcingLabError):
    """Malformed dataset records; `lines` lists the offending 1-based line numbers."""

    def __init__(self, message: str, lines: Optional[List[int]] = None):
        self.lines = list(lines or [])
        if self.lines:
            message = f"{message} (lines: {', '.join(str(n) for n in self.lines)})"
        super().__init__(message)


class ConfigError(ForcingLabError):
    """Invalid run configuration; `problems` holds one message per field."""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class TrainingDivergedError(ForcingLabError):
    """Loss became non-finite; the last finite parameters were snapshotted."""

    def __init__(self, message: str, step: int, snapshot_path: Optional[str] = None):
        self.step = step
        self.snapshot_path = snapshot_path
        if snapshot_path:
            message = f"{message} (snapshot: {snapshot_path})"
        super().__init__(message)
