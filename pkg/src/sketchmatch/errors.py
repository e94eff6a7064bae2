"""Exception hierarchy shared across the package.

Preconditions on plain values raise ``ValueError`` directly; these classes
cover failures that the CLI maps to distinct exit codes.
"""


class DataError(Exception):
    """Input data is structurally invalid (manifest, corpus, checkpoint schema)."""


class ManifestError(DataError):
    """A manifest file failed to parse or violated its record schema."""


class CheckpointError(DataError):
    """A parameter archive is missing, corrupt, or dimensionally incompatible."""


class NumericError(Exception):
    """A numeric computation produced an unusable result."""


class DivergenceError(NumericError):
    """Training loss diverged past the configured guard."""
