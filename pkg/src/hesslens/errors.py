"""Exception hierarchy shared by all hesslens modules."""


class HessLensError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HessLensError):
    """Operands have incompatible shapes or lengths."""


class ContractError(HessLensError):
    """An input violates a documented precondition (e.g. asymmetry)."""


class CapacityError(HessLensError):
    """A dense computation was requested beyond its supported size."""


class NumericError(HessLensError):
    """A non-finite value appeared during evaluation.

    ``node_id`` identifies the first offending graph node when known.
    """

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class DegenerateDirectionError(HessLensError):
    """Orthogonalization left essentially nothing; caller must resample."""


class DegenerateSpectrumError(HessLensError):
    """Power iteration could not find a usable start direction."""


class PSDViolationError(HessLensError):
    """CG met negative curvature beyond tolerance on a supposedly PSD map."""


class ZeroDirectionError(HessLensError):
    """A direction to be normalized has (near-)zero norm."""


class DivergenceError(HessLensError):
    """Training diverged; carries the last good checkpoint state."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class FormatError(HessLensError):
    """A file does not conform to its binary/text format."""


class CorruptionError(HessLensError):
    """Stored content hash does not match the payload."""


class VersionError(HessLensError):
    """Stored format version is not supported."""


class ConfigError(HessLensError):
    """An experiment configuration failed validation."""


class DependencyError(HessLensError):
    """A command needs an artifact produced by a prior command."""
