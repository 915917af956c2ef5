"""Class-adaptive cooperative LiDAR detection at desk scale.

Submodules: ``tensor`` (autodiff arrays), ``geometry`` (poses, boxes, IoU,
pillars), ``attention`` (multi-scale windows), ``fusion`` (cross-agent),
``enhance`` (ASPP and SE), ``detection`` (anchors, losses, NMS),
``evaluation`` (AP), ``simulator`` (synthetic scenes) and ``runtime``
(model, training, CLI support).
"""

from .errors import (
    CapacityError,
    CoopDetError,
    DimensionError,
    DomainError,
    EvaluationError,
    NonFiniteError,
    ParseError,
)
from .geometry import CLASSES, BevGrid, Box3D, PointCloud, Pose

__version__ = "0.1.0"

__all__ = [
    "CLASSES", "BevGrid", "Box3D", "CapacityError", "CoopDetError", "DimensionError", "DomainError",
    "EvaluationError", "NonFiniteError", "ParseError", "PointCloud", "Pose", "__version__",
]
