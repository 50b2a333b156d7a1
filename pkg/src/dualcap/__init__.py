"""Dual-view RGB-D motion capture maths.

Submodules:

* ``geometry``: cameras, poses, trajectories, projection (x_cam = R x_world + T, Z-up world).
* ``alignment``: Procrustes fits, trajectory offsets, chunk stitching, depth scale.
* ``losses`` / ``calibrator``: per-view yaw+translation calibration against the scene.
* ``triangulation``: confidence-weighted multi-view DLT.
* ``skeleton`` / ``motion_fit``: kinematic body model, world-frame fitting, contact alignment.
* ``fusion``: TSDF integration, marching cubes, mesh cleanup.
* ``metrics``: W-MPJPE, WA-MPJPE, RTE, jitter, reprojection error.
* ``synth``: synthetic scenes, motions and observations with ground truth.
* ``io`` / ``cli``: file formats and the batch pipeline.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
from .errors import DualcapError, InputError, NumericalError  # noqa: F401
