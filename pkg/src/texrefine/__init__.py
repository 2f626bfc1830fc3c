"""Facial UV texture refinement by differentiable-rendering style transfer."""

__version__ = "0.1.0"

from .errors import ConfigError, MeshFormatError, MissingArtifactError, TexRefineError
from .geometry import CameraPose, FaceMesh, TextureMap

__all__ = [
    "__version__",
    "CameraPose",
    "ConfigError",
    "FaceMesh",
    "MeshFormatError",
    "MissingArtifactError",
    "TexRefineError",
    "TextureMap",
]
