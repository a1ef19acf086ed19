"""Exception hierarchy shared by every module of the package."""


class NodeCorrError(Exception):
    """Base class for all errors raised by nodecorr."""


class ShapeError(NodeCorrError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(NodeCorrError, ArithmeticError):
    """A non-finite value was fed to, or produced by, an operation."""


class StateError(NodeCorrError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class ResourceError(NodeCorrError, MemoryError):
    """A dense computation would exceed its configured size cap."""


class InsufficientPointsError(NodeCorrError, ValueError):
    """Too few candidate points for the requested neighborhood."""


class GraphMismatchError(NodeCorrError, IndexError):
    """A neighbor graph refers to nodes that do not exist."""


class TrainingError(NodeCorrError, RuntimeError):
    """Training diverged or was given unusable data."""


class ConfigError(NodeCorrError, ValueError):
    """Invalid configuration values."""


class FormatError(NodeCorrError, ValueError):
    """A file could not be parsed or has an unsupported format."""


class VersionError(NodeCorrError, ValueError):
    """A checkpoint does not match the expected format or model layout."""
