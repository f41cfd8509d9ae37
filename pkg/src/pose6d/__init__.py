"""Single-shot 6D pose pipeline: grid codec, PnP, loss and metrics."""

from .geometry import CameraIntrinsics, ObjectModel, Pose
from .gridcodec import Anchor, Detection, GridSpec, GroundTruthFrame, LabelGrid
from .pnp import Correspondences, PnPResult, solve_pnp

__all__ = [
    "Anchor", "CameraIntrinsics", "Correspondences", "Detection", "GridSpec",
    "GroundTruthFrame", "LabelGrid", "ObjectModel", "PnPResult", "Pose", "solve_pnp",
]
__version__ = "0.1.0"
