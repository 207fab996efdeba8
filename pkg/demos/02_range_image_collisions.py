"""
Why not a range image for a cocoon?
===================================

A spherical projection assumes one viewpoint. Fused clouds from several
sensors break that: returns from different sensors land on the same
(layer, azimuth) pixel and only the nearest survives. The bird-eye grid
keeps them apart.
"""

from volmap import synthgen
from volmap.geometry import fuse
from volmap.spherical import SphericalConfig, occlusion_report
from volmap.voxelizer import GridConfig

spec = synthgen.random_scene(seed=3)
fused = fuse(synthgen.generate(spec))
grid = GridConfig((-30, 30), (-20, 20), 0.4, 0.4, 8)

###############################################################################
# 8 rings by 600 azimuth bins, i.e. 0.6 degree columns.
rep = occlusion_report(fused, SphericalConfig(n_layers=8, n_angles=600), grid)
print(f"{rep['in_range_points']} points -> {rep['nonzero_pixels']} pixels, "
      f"{rep['collisions']} lost ({100 * rep['collision_rate']:.1f}%)")

###############################################################################
# Which sensor pairs collide? "a-b" counts points of one sensor hidden by
# the other; "a-a" are losses within a single sensor, since the fused
# origin is not where that sensor sits.
for pair, n in sorted(rep["pair_collisions"].items(), key=lambda kv: -kv[1])[:6]:
    print(f"  {pair}: {n}")

###############################################################################
# Of the lost points, most sit in a different grid voxel than the point that
# hid them.
print("kept apart by the grid:", rep["grid_separated"], " same voxel:", rep["grid_shared"],
      " outside grid:", rep["grid_outside"])

###############################################################################
# A finer azimuth helps, but does not remove the effect.
for n_angles in (600, 1800, 3600):
    r = occlusion_report(fused, SphericalConfig(8, n_angles))
    print(f"{n_angles:5d} columns: {100 * r['collision_rate']:.1f}% lost")
