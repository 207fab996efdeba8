"""
A KITTI-style frame end to end
==============================

KITTI velodyne files carry no ring index, so layers come from elevation
binning over the HDL-64E vertical field of view. Boxes are annotated in the
rectified camera frame and must be moved into the LiDAR frame before they
can label points. We fake one frame on disk and run the same code paths.
"""

import os
import tempfile

import numpy as np

from volmap import config, dataio, metrics, volmapnet
from volmap.geometry import PointCloud
from volmap.labeler import label_points
from volmap.voxelizer import voxelize

rng = np.random.default_rng(0)
tmp = tempfile.mkdtemp()

###############################################################################
# A ground plane 1.7 m below the sensor plus a box-shaped car 12 m ahead.
ground = np.column_stack([rng.uniform(2, 60, 20000), rng.uniform(-20, 20, 20000), np.full(20000, -1.7)])
car = np.column_stack([rng.uniform(10.0, 14.0, 800), rng.uniform(-1.9, -0.3, 800), rng.uniform(-1.7, -0.2, 800)])
cloud = PointCloud.from_arrays(np.vstack([ground, car]), rng.random(20800) * 0.5)
dataio.write_velodyne_bin(cloud, os.path.join(tmp, "000000.bin"))

###############################################################################
# The annotation: camera frame, bottom-centre location, yaw about camera y.
# Here the camera is rotated so that z points forward, as in KITTI.
with open(os.path.join(tmp, "calib.txt"), "w") as f:
    f.write("R0_rect: 1 0 0 0 1 0 0 0 1\n")
    f.write("Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n")
with open(os.path.join(tmp, "label.txt"), "w") as f:
    # h w l, then x y z (camera), ry
    f.write("Car 0 0 0 0 0 0 0 1.5 1.6 4.0 1.1 1.7 12.0 0.0\n")

calib = dataio.read_kitti_calib(os.path.join(tmp, "calib.txt"))
boxes = dataio.read_kitti_labels(os.path.join(tmp, "label.txt"), calib)
print("box in the LiDAR frame:", np.round(boxes[0].center, 2), np.round(boxes[0].dimensions, 2))

###############################################################################
# Derive per-point labels, then bin elevations into ten layers.
frame = label_points(dataio.read_velodyne_bin(os.path.join(tmp, "000000.bin")), boxes)
cfg = config.resolve({"grid": {"shape_override": [160, 112]}})
frame = dataio.layer_binning(frame, 10, cfg.elev_range)
print("points labelled Car:", int((frame.label == 1).sum()), " layers used:", np.unique(frame.layer))

###############################################################################
# The KITTI-sized input: 10 x 160 x 112.
grid = voxelize(frame, cfg.grid)
print("input tensor:", grid.values.shape, "origin", cfg.grid.origin)

###############################################################################
# An untrained network still exercises the whole inference path; time it.
params = volmapnet.init_params(cfg.net, seed=0)
timing = metrics.time_inference(frame, params, cfg.grid, n_warmup=1, n_runs=5)
print(f"inference: {timing['mean_ms']:.0f} ms mean over {timing['n_runs']} runs, "
      f"{timing['blas_threads']} BLAS thread(s)")
