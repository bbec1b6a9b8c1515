"""Deformation-informed 4D Gaussian splatting for dynamic cone-beam CT."""
import os as _os

# numba falls back noisily when the system TBB is too old
_os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

from .geometry import ScanGeometry, ViewPose, make_circular_geometry, view_pose  # noqa: E402
from .cloud import GaussianCloud, GridSpec, rasterize_to_volume  # noqa: E402
from .splatting import render, render_backward  # noqa: E402
from .ffd import FFDMotionModel, SpatialLattice, TemporalSpline  # noqa: E402
from .warp import MotionMode, CloudSnapshot, warp  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "ScanGeometry",
    "ViewPose",
    "make_circular_geometry",
    "view_pose",
    "GaussianCloud",
    "GridSpec",
    "rasterize_to_volume",
    "render",
    "render_backward",
    "FFDMotionModel",
    "SpatialLattice",
    "TemporalSpline",
    "MotionMode",
    "CloudSnapshot",
    "warp",
]
