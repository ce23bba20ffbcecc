"""Model construction, inference and serialization."""

from .backbones import (ArchitectureSpec, BACKBONES, INPUT_SHAPE, Network,
                        build, parameter_count, predict_batch)
from .bundle import FORMAT_VERSION, ModelBundle, load, save

__all__ = [
    "ArchitectureSpec", "BACKBONES", "INPUT_SHAPE", "Network",
    "build", "parameter_count", "predict_batch",
    "FORMAT_VERSION", "ModelBundle", "load", "save",
]
