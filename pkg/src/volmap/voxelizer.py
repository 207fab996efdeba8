"""Volumetric bird-eye-view grid with LiDAR layers as channels.

x and y are rasterised into half-open cells; the layer index of each point
selects the channel, so height is never discretised.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .geometry import IGNORE_LABEL, PointCloud
from .labeler import ClassStats


def _cell_count(extent: float, res: float) -> int:
    n = extent / res
    # 60 / 0.4 may land a few ulps above 150; do not let that add a row
    if abs(n - round(n)) < 1e-9:
        return int(round(n))
    return int(math.ceil(n))


@dataclass(frozen=True)
class GridConfig:
    x_range: tuple
    y_range: tuple
    res_x: float
    res_y: float
    n_layers: int
    pad_to_multiple: int = 8
    shape_override: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        if self.shape_override is not None:
            object.__setattr__(self, "shape_override", tuple(int(v) for v in self.shape_override))
            if min(self.shape_override) < 1:
                raise ValueError("shape_override must be positive")
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise ValueError("grid ranges must satisfy max > min")
        if not (self.res_x > 0 and self.res_y > 0):
            raise ValueError("grid resolution must be positive")
        if self.n_layers < 1 or self.pad_to_multiple < 1:
            raise ValueError("n_layers and pad_to_multiple must be >= 1")

    @property
    def formula_shape(self) -> tuple[int, int]:
        """(rows, cols) from range / resolution."""
        return (_cell_count(self.x_range[1] - self.x_range[0], self.res_x),
                _cell_count(self.y_range[1] - self.y_range[0], self.res_y))

    @property
    def shape(self) -> tuple[int, int]:
        return self.shape_override or self.formula_shape

    @property
    def origin(self) -> tuple[float, float]:
        """Lower x/y corner of the rasterised region.

        An override keeps the ROI centre and grows or trims it evenly on
        both sides.
        """
        if self.shape_override is None:
            return self.x_range[0], self.y_range[0]
        rows, cols = self.shape_override
        cx = (self.x_range[0] + self.x_range[1]) / 2
        cy = (self.y_range[0] + self.y_range[1]) / 2
        return cx - rows * self.res_x / 2, cy - cols * self.res_y / 2

    def to_json(self) -> dict:
        d = asdict(self)
        d["x_range"], d["y_range"] = list(self.x_range), list(self.y_range)
        d["shape_override"] = None if self.shape_override is None else list(self.shape_override)
        return d

    @classmethod
    def from_json(cls, d) -> "GridConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class VolGrid:
    values: np.ndarray       # [n_layers, rows, cols] float32
    point_cell: np.ndarray   # (M, 2) row/col of every in-ROI point
    in_roi: np.ndarray       # (M,) indices into the source cloud
    out_of_roi: np.ndarray   # indices of points outside the grid
    cfg: GridConfig

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]


def cell_indices(xyz: np.ndarray, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row/col of every point and a mask of those that land inside the grid."""
    x0, y0 = cfg.origin
    rows, cols = cfg.shape
    r = np.floor((xyz[:, 0] - x0) / cfg.res_x)
    c = np.floor((xyz[:, 1] - y0) / cfg.res_y)
    inside = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
    return r, c, inside


def voxelize(cloud: PointCloud, cfg: GridConfig) -> VolGrid:
    """Max intensity per (layer, row, col) cell.

    A point is in the ROI iff its floor index lands inside the grid, which
    is the half-open interval ``[origin, origin + shape * res)`` per axis.
    """
    bad = np.flatnonzero(cloud.layer >= cfg.n_layers)
    if len(bad):
        i = int(bad[0])
        raise ValueError(f"point {i} has layer {int(cloud.layer[i])} >= n_layers {cfg.n_layers}")
    rows, cols = cfg.shape
    r, c, inside = cell_indices(cloud.xyz, cfg)
    in_roi = np.flatnonzero(inside)
    point_cell = np.stack([r[in_roi], c[in_roi]], axis=1).astype(np.int64).reshape(-1, 2)
    values = np.zeros((cfg.n_layers, rows, cols), dtype=np.float32)
    flat = (cloud.layer[in_roi].astype(np.int64) * rows + point_cell[:, 0]) * cols + point_cell[:, 1]
    np.maximum.at(values.reshape(-1), flat, cloud.intensity[in_roi])
    return VolGrid(values, point_cell, in_roi, np.flatnonzero(~inside), cfg)


def cell_ground_truth(grid: VolGrid, cloud: PointCloud, stats: ClassStats) -> np.ndarray:
    """Majority class per occupied cell, 255 elsewhere.

    Ties go to the class with the lower frequency in ``stats`` (then the
    lower class id). Ignore-labelled points do not vote.
    """
    if cloud.label is None:
        raise ValueError("cloud has no labels")
    rows, cols = grid.shape
    k = stats.n_classes
    lab = cloud.label[grid.in_roi].astype(np.int64)
    valid = lab != IGNORE_LABEL
    if valid.any() and lab[valid].max() >= k:
        raise ValueError("label outside the class statistics")
    cell = grid.point_cell[valid, 0] * cols + grid.point_cell[valid, 1]
    votes = np.zeros((rows * cols, k), dtype=np.int64)
    np.add.at(votes, (cell, lab[valid]), 1)
    priority = np.lexsort((np.arange(k), np.asarray(stats.frequencies)))
    winner = priority[np.argmax(votes[:, priority], axis=1)]
    out = np.where(votes.sum(axis=1) > 0, winner, IGNORE_LABEL)
    return out.reshape(rows, cols).astype(np.uint8)


def backproject(cell_labels: np.ndarray, grid: VolGrid, cloud: PointCloud) -> PointCloud:
    """Give every in-ROI point the label of its cell, 255 to the rest."""
    cell_labels = np.asarray(cell_labels)
    if cell_labels.shape != tuple(grid.shape):
        raise ValueError(f"cell labels {cell_labels.shape} do not match grid {tuple(grid.shape)}")
    if len(grid.in_roi) + len(grid.out_of_roi) != len(cloud):
        raise ValueError("grid was built from a different cloud")
    labels = np.full(len(cloud), IGNORE_LABEL, dtype=np.int32)
    labels[grid.in_roi] = cell_labels[grid.point_cell[:, 0], grid.point_cell[:, 1]]
    return cloud.replace(label=labels)


@dataclass(frozen=True)
class CropRecord:
    rows: int
    cols: int


def pad_and_crop(values: np.ndarray, m: int) -> tuple[np.ndarray, CropRecord]:
    """Zero-pad the last two axes up to multiples of ``m`` on the high side."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rows, cols = values.shape[-2:]
    pr, pc = -rows % m, -cols % m
    if pr == 0 and pc == 0:
        return values, CropRecord(rows, cols)
    pad = [(0, 0)] * (values.ndim - 2) + [(0, pr), (0, pc)]
    return np.pad(values, pad), CropRecord(rows, cols)


def crop(values: np.ndarray, record: CropRecord) -> np.ndarray:
    return values[..., :record.rows, :record.cols]
