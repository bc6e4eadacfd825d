"""Exception types raised across the toolkit."""


class MatsegError(Exception):
    """Base class for all toolkit errors."""


class MalformedObjError(MatsegError):
    """OBJ file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyMeshError(MatsegError):
    """Mesh has no faces or no surface area."""


class UnknownComponentError(MatsegError):
    """A label document references a component the mesh does not have."""


class DegenerateGeometryError(MatsegError):
    """Point set is too degenerate (rank < 2) for rigid registration."""


class MissingUnariesError(MatsegError):
    """CRF construction was given no unary samples."""


class MissingDataError(MatsegError):
    """Training was given an empty dataset."""


class OracleSizeError(MatsegError):
    """Brute-force enumeration was asked for a graph that is too large."""


class InvalidKError(MatsegError):
    """Retrieval k exceeds the database size."""


class AlignmentError(MatsegError):
    """Predictions and ground truths have mismatched lengths."""


class ConfigError(MatsegError):
    """Configuration file contains unknown keys or invalid values."""
