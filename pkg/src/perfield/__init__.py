"""Sparse-voxel radiance-field engine and dataset tooling.

Optimizes per-voxel density and spherical-harmonic color from posed images,
renders novel views by differentiable volumetric integration, and packages
trained scenes into a compact quantized container with pose, background,
and camera augmentation utilities.
"""

from .geometry import AxisAngle, Camera, Ray
from .grid import BackgroundModel, SparseVoxelGrid
from .renderer import RenderConfig
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AxisAngle",
    "BackgroundModel",
    "Camera",
    "Ray",
    "RenderConfig",
    "SparseVoxelGrid",
    "TrainConfig",
    "__version__",
]
