"""Motion-compensated dynamic MR reconstruction with unrolled motion estimation."""

from .data import (
    CoilMaps,
    Dataset,
    ImageSequence,
    KSpaceSet,
    MotionConfig,
    MotionFieldSet,
    ReconConfig,
    SamplingMaskSet,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CoilMaps",
    "Dataset",
    "ImageSequence",
    "KSpaceSet",
    "MotionConfig",
    "MotionFieldSet",
    "ReconConfig",
    "SamplingMaskSet",
    "ValidationError",
    "__version__",
]
