"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes: ConfigError -> 2,
IOFormatError -> 3, everything else derived from NocGuardError -> 4.
"""


class NocGuardError(Exception):
    """Base class for all nocguard errors."""


class ConfigError(NocGuardError):
    """Invalid configuration value (dimension, rate, duration, widths...)."""


class TopologyError(NocGuardError):
    """Invalid node id, adjacency, or memory-controller placement."""


class ScenarioError(NocGuardError):
    """Invalid simulation scenario (e.g. an MC node listed as a MIP)."""


class DatasetError(NocGuardError):
    """Dataset construction or split failure (degenerate class, shapes)."""


class ShapeError(NocGuardError):
    """Tensor shape mismatch at a layer or graph boundary."""


class TrainingError(NocGuardError):
    """Training cannot proceed (degenerate classes, NaN loss)."""


class InferenceError(NocGuardError):
    """Model/graph incompatibility at inference time."""


class NumericsError(NocGuardError):
    """Non-finite value crossed a layer boundary."""


class IOFormatError(NocGuardError):
    """Corrupt or unsupported on-disk artifact (bad magic, digest, version)."""
