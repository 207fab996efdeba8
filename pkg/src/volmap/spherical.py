"""Range-image (spherical) projection and the fused-cloud collision diagnostic.

A multi-sensor cloud seen from one reference origin is not a single sphere:
points from different sensors can land on the same (layer, azimuth) pixel
and only the nearest survives. :func:`occlusion_report` counts those losses
and checks whether the bird-eye-view grid keeps the points apart.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import PointCloud
from .voxelizer import GridConfig, cell_indices


@dataclass(frozen=True)
class SphericalConfig:
    n_layers: int = 80
    n_angles: int = 600
    azimuth_range: tuple = (-math.pi, math.pi)

    def __post_init__(self):
        if self.n_layers < 1 or self.n_angles < 1:
            raise ValueError("n_layers and n_angles must be >= 1")
        lo, hi = self.azimuth_range
        if not hi > lo:
            raise ValueError("azimuth_range must be increasing")

    @property
    def full_circle(self) -> bool:
        lo, hi = self.azimuth_range
        return hi - lo >= 2 * math.pi


@dataclass(frozen=True, eq=False)
class Projection:
    image: np.ndarray        # [2, n_layers, n_angles]: range, intensity
    pixel: np.ndarray        # flat pixel per point, -1 when dropped
    winner: np.ndarray       # flat pixel -> index of the kept point, -1 if empty
    dropped: int             # points outside the layer / azimuth range
    collisions: int


def azimuth_bins(xyz: np.ndarray, cfg: SphericalConfig) -> np.ndarray:
    lo, hi = cfg.azimuth_range
    az = np.arctan2(xyz[:, 1], xyz[:, 0])
    b = np.floor((az - lo) / (hi - lo) * cfg.n_angles).astype(np.int64)
    if cfg.full_circle:
        b %= cfg.n_angles
    return b


def project(cloud: PointCloud, cfg: SphericalConfig) -> Projection:
    """Nearest-wins projection; equal ranges keep the lower point index."""
    n = len(cloud)
    layer = cloud.layer.astype(np.int64)
    col = azimuth_bins(cloud.xyz, cfg)
    ok = (layer < cfg.n_layers) & (col >= 0) & (col < cfg.n_angles)
    pixel = np.where(ok, layer * cfg.n_angles + col, -1)
    rng = np.linalg.norm(cloud.xyz, axis=1)

    idx = np.flatnonzero(ok)
    order = idx[np.lexsort((idx, rng[idx], pixel[idx]))]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pixel[order][1:] != pixel[order][:-1]
    kept = order[first]

    winner = np.full(cfg.n_layers * cfg.n_angles, -1, dtype=np.int64)
    winner[pixel[kept]] = kept
    image = np.zeros((2, cfg.n_layers * cfg.n_angles), dtype=np.float32)
    image[0, pixel[kept]] = rng[kept]
    image[1, pixel[kept]] = cloud.intensity[kept]
    image = image.reshape(2, cfg.n_layers, cfg.n_angles)
    return Projection(image, pixel, winner, int(n - len(idx)), int(len(idx) - len(kept)))


def spherical_project(cloud: PointCloud, cfg: SphericalConfig) -> tuple[np.ndarray, int]:
    p = project(cloud, cfg)
    return p.image, p.collisions


def occlusion_report(fused: PointCloud, cfg: SphericalConfig,
                     grid_cfg: Optional[GridConfig] = None) -> dict:
    """Collision statistics of a fused cloud under spherical projection.

    Pair keys are ``"a-b"`` with ``a <= b`` (kept and displaced sensor ids).
    With ``grid_cfg`` the report also counts displaced points that the
    bird-eye-view grid stores in a different (layer, row, col) voxel than
    the point that displaced them.
    """
    p = project(fused, cfg)
    in_range = len(fused) - p.dropped
    displaced = np.flatnonzero(p.pixel >= 0)
    displaced = displaced[p.winner[p.pixel[displaced]] != displaced]
    keeper = p.winner[p.pixel[displaced]]

    pairs = Counter()
    for a, b in zip(fused.sensor_id[keeper].tolist(), fused.sensor_id[displaced].tolist()):
        lo, hi = min(a, b), max(a, b)
        pairs[f"{lo}-{hi}"] += 1
    report = {
        "total_points": int(len(fused)),
        "in_range_points": int(in_range),
        "dropped_points": int(p.dropped),
        "nonzero_pixels": int((p.winner >= 0).sum()),
        "collisions": int(p.collisions),
        "collision_rate": float(p.collisions / in_range) if in_range else 0.0,
        "pair_collisions": dict(sorted(pairs.items())),
    }
    if grid_cfg is not None:
        r, c, inside = cell_indices(fused.xyz, grid_cfg)
        shared = (inside[keeper] & (fused.layer[displaced] == fused.layer[keeper])
                  & (r[displaced] == r[keeper]) & (c[displaced] == c[keeper]))
        report["grid_separated"] = int((inside[displaced] & ~shared).sum())
        report["grid_shared"] = int((inside[displaced] & shared).sum())
        report["grid_outside"] = int((~inside[displaced]).sum())
    return report
