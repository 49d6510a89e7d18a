"""Shared failure type for the staged design pipeline.

Every recoverable pipeline failure carries a ``kind`` naming the stage that
rejected (rank condition, LMI feasibility, or the data-driven equation
solve), so the CLI can map it to a stable exit code.
"""

from __future__ import annotations

__all__ = ["StageError", "EXIT_CODES"]

EXIT_CODES = {"rank": 2, "lmi": 3, "sylvester": 4, "io": 5}


class StageError(RuntimeError):
    """Raised when a design stage fails a checkable condition."""

    def __init__(self, kind: str, message: str, **details):
        if kind not in EXIT_CODES:
            raise ValueError(f"unknown stage kind {kind!r}")
        super().__init__(message)
        self.kind = kind
        self.details = details

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.kind]
