"""Frame directories on disk.

Two layouts share one loader:

* KITTI-style: ``velodyne/<id>.bin`` with optional per-point ``labels/<id>.txt``
  (written by ``derive-labels``), boxes in ``label_2/<id>.txt``.
* cocoon: ``poses.txt`` plus one ``velodyne/<id>_s<sensor>.bin`` per sensor
  in that sensor's frame, with ``rings/`` (native layer per point) and
  ``labels/`` text files of the same stem. This is what ``gen`` writes.

Loaders return one cloud per frame in the vehicle (fused) frame, with
layers assigned according to the run config.
"""
from __future__ import annotations

import math
import os
import re
from typing import Optional, Sequence

import numpy as np

from . import dataio
from .geometry import PointCloud, SensorPose, fuse

POSES = "poses.txt"
_COCOON = re.compile(r"^(?P<frame>.+)_s(?P<sid>\d+)$")


def is_cocoon(root: str) -> bool:
    return os.path.exists(os.path.join(root, POSES))


def _stems(root: str) -> list[str]:
    vdir = os.path.join(root, "velodyne")
    if not os.path.isdir(vdir):
        raise FileNotFoundError(f"{root}: no velodyne/ directory")
    return sorted(f[:-4] for f in os.listdir(vdir) if f.endswith(".bin"))


def frame_ids(root: str) -> list[str]:
    stems = _stems(root)
    if not is_cocoon(root):
        return stems
    ids = set()
    for s in stems:
        m = _COCOON.match(s)
        if m is None:
            raise ValueError(f"{root}: velodyne/{s}.bin does not follow <frame>_s<sensor>.bin")
        ids.add(m["frame"])
    return sorted(ids)


def select(root: str, ids: Optional[Sequence[str]]) -> list[str]:
    """``ids`` checked against what exists; None means every frame."""
    have = frame_ids(root)
    if ids is None:
        return have
    missing = sorted(set(ids) - set(have))
    if missing:
        raise FileNotFoundError(f"{root}: frames not found: {', '.join(missing)}")
    return list(ids)


def _maybe_labels(path: str, n: int) -> Optional[np.ndarray]:
    if not os.path.exists(path):
        return None
    labels = dataio.read_label_file(path)
    if len(labels) != n:
        raise dataio.ParseError(f"{path}: {len(labels)} labels for {n} points")
    return labels


def assign_layers(cloud: PointCloud, cfg, rings: Optional[np.ndarray] = None) -> PointCloud:
    """Native ring indices or elevation binning, per ``cfg.layers['mode']``."""
    n_layers = cfg.grid.n_layers
    if cfg.layers["mode"] == "native":
        if rings is None and len(cloud):
            raise ValueError("layers mode 'native' needs per-point ring indices")
        if rings is None:
            return cloud
        if len(rings) and (rings.min() < 0 or rings.max() >= n_layers):
            raise ValueError(f"ring index outside 0..{n_layers - 1}")
        return cloud.replace(layer=rings)
    return dataio.layer_binning(cloud, n_layers, cfg.elev_range)


def load_sensor_frames(root: str, frame_id: str, cfg, poses: Optional[dict] = None,
                       sensors: Optional[Sequence[int]] = None) -> list[tuple[PointCloud, SensorPose]]:
    """Per-sensor clouds (sensor frame) and their poses for one cocoon frame."""
    poses = dataio.read_pose_file(os.path.join(root, POSES)) if poses is None else poses
    out = []
    for sid in sorted(poses):
        if sensors is not None and sid not in sensors:
            continue
        stem = f"{frame_id}_s{sid}"
        path = os.path.join(root, "velodyne", stem + ".bin")
        if not os.path.exists(path):
            continue
        raw = dataio.read_velodyne_bin(path)
        cloud = PointCloud.from_arrays(raw.xyz, raw.intensity, None, sid)
        ring_path = os.path.join(root, "rings", stem + ".txt")
        rings = _maybe_labels(ring_path, len(cloud))
        cloud = assign_layers(cloud, cfg, rings)
        labels = _maybe_labels(os.path.join(root, "labels", stem + ".txt"), len(cloud))
        if labels is not None:
            cloud = cloud.replace(label=labels)
        out.append((cloud, poses[sid]))
    if not out:
        raise FileNotFoundError(f"{root}: no sensor clouds for frame {frame_id}")
    return out


def load_frame(root: str, frame_id: str, cfg, poses: Optional[dict] = None,
               sensors: Optional[Sequence[int]] = None) -> PointCloud:
    """One frame in the vehicle frame; labelled when label files exist."""
    if is_cocoon(root) or poses is not None:
        entries = load_sensor_frames(root, frame_id, cfg, poses, sensors)
        if any(c.label is None for c, _ in entries) and not all(c.label is None for c, _ in entries):
            raise dataio.ParseError(f"{root}: frame {frame_id} has labels for only some sensors")
        return fuse(entries)
    cloud = dataio.read_velodyne_bin(os.path.join(root, "velodyne", frame_id + ".bin"))
    labels = _maybe_labels(os.path.join(root, "labels", frame_id + ".txt"), len(cloud))
    if labels is not None:
        cloud = cloud.replace(label=labels)
    cloud = assign_layers(cloud, cfg)
    fov = cfg.layers.get("camera_fov_deg")
    if fov is not None:
        cloud = cloud.subset(dataio.camera_fov_mask(cloud, math.radians(fov)))
    return cloud


def write_cocoon_frame(root: str, frame_id: str, entries: Sequence[tuple[int, PointCloud, SensorPose]]) -> None:
    """Writes (sensor_id, cloud, pose) entries; poses.txt is created or checked for agreement."""
    for sub in ("velodyne", "rings", "labels"):
        dataio.ensure_dir(os.path.join(root, sub))
    poses = {int(sid): pose for sid, _, pose in entries}
    path = os.path.join(root, POSES)
    if os.path.exists(path):
        known = dataio.read_pose_file(path)
        for sid, pose in poses.items():
            if sid in known and not np.allclose(known[sid].matrix, pose.matrix, atol=1e-9):
                raise ValueError(f"{path}: sensor {sid} pose differs from the frame being written")
        known.update(poses)
        poses = known
    dataio.write_pose_file(poses, path)
    for sid, cloud, _ in entries:
        stem = f"{frame_id}_s{int(sid)}"
        dataio.write_velodyne_bin(cloud, os.path.join(root, "velodyne", stem + ".bin"))
        dataio.write_label_file(cloud.layer, os.path.join(root, "rings", stem + ".txt"))
        if cloud.label is not None:
            dataio.write_label_file(cloud.label, os.path.join(root, "labels", stem + ".txt"))
