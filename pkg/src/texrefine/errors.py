"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericalError -> 3, MissingArtifactError -> 4. Everything else is a bug.
"""


class TexRefineError(Exception):
    """Base class for all package errors."""


class ConfigError(TexRefineError):
    """Invalid configuration, malformed input file, or inconsistent inputs."""


class MeshFormatError(ConfigError):
    """OBJ file violates the supported subset (v/vt per vertex, shared indices)."""


class NumericalError(TexRefineError):
    """Non-finite loss or other numerical failure during optimization."""


class MissingArtifactError(TexRefineError):
    """A required file (weights bundle, checkpoint, prepare output) is absent."""
