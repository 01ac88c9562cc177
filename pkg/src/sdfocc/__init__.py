"""Self-supervised occupancy from posed images via signed distance fields.

Dense voxel (or tri-plane) SDF fields rendered with SDF-derived opacities,
fitted with multi-view photometric losses, and turned into occupancy grids
by sign thresholding.  Everything runs on numpy with a small reverse-mode
autodiff tape.
"""

from .errors import (BehindCameraError, ConfigError, DomainError, EmptyRayError, NumericError,
                     ParseError, SdfOccError, StructuralError)

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError", "ConfigError", "DomainError", "EmptyRayError", "NumericError",
    "ParseError", "SdfOccError", "StructuralError", "__version__",
]
