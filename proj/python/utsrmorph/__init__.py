"""Deformable 3D registration: transformer encoder-decoder with a
superresolution decoder, differentiable warping, and evaluation metrics.

Volumes are numpy float32 arrays laid out [Z, Y, X]; displacement fields are
[3, Z, Y, X] with channels (u_x, u_y, u_z) in voxel units.
"""

from ._core import (
    Model,
    dice,
    gen_synthetic,
    hd95,
    jacobian_stats,
    warp,
)

__all__ = [
    "Model",
    "dice",
    "gen_synthetic",
    "hd95",
    "jacobian_stats",
    "warp",
]
