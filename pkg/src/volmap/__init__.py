"""Volumetric bird-eye-view semantic segmentation of (multi-)LiDAR point clouds.

Points are binned into a top-down grid whose channels are the sensor's
height layers; a small UNet labels the cells and each raw point inherits
the label of its cell.
"""
from .geometry import IGNORE_LABEL, OrientedBox3D, PointCloud, SensorPose, fuse
from .voxelizer import GridConfig, VolGrid, backproject, cell_ground_truth, voxelize

__version__ = "0.1.0"

__all__ = [
    "IGNORE_LABEL", "OrientedBox3D", "PointCloud", "SensorPose", "fuse",
    "GridConfig", "VolGrid", "backproject", "cell_ground_truth", "voxelize",
]
