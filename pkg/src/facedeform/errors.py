"""Exception hierarchy for facedeform."""

from __future__ import annotations

from pathlib import Path


class FaceDeformError(Exception):
    """Base class for every error raised by facedeform."""


class InvalidParameterError(FaceDeformError, ValueError):
    """An argument violates an operation's precondition."""


class ParseError(FaceDeformError, ValueError):
    """A text file could not be parsed.

    Attributes:
        path: File being parsed, if known
        line: 1-based line number of the offending line, or None at end of file
    """

    def __init__(self, message: str, *, path: str | Path | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = []
        if self.path is not None:
            where.append(self.path)
        where.append(f"line {line}" if line is not None else "EOF")
        super().__init__(f"{':'.join(where)}: {message}")


class UnsupportedFaceError(ParseError):
    """An OBJ face record is not a triangle."""


class MeshConstructionError(FaceDeformError, ValueError):
    """A triangle mesh has out-of-range indices or degenerate triangles."""


class DegenerateConfigurationError(FaceDeformError, ValueError):
    """Point correspondences cannot determine a rigid transform."""


class GraphConnectivityError(FaceDeformError, ValueError):
    """Some unconstrained graph nodes cannot reach the constrained set."""


class TrainingAbortError(FaceDeformError, RuntimeError):
    """Training cannot continue (for example a non-finite gradient)."""


class InternalConsistencyError(FaceDeformError, RuntimeError):
    """A numerical guarantee that should always hold was violated."""
