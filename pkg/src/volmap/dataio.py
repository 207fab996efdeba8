"""KITTI-style readers and writers, pose files, per-point label files and PLY export."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .geometry import IGNORE_LABEL, OrientedBox3D, PointCloud, SensorPose, euler_zyx, rotation_zyx

log = logging.getLogger(__name__)

KITTI_CLASS_MAP = {"Car": 1, "Van": 2, "Truck": 3, "Pedestrian": 4, "Cyclist": 5}
# HDL-64E vertical field of view
HDL64_ELEV_RANGE = (math.radians(-24.9), math.radians(2.0))

_RECORD = np.dtype("<f4")


class ParseError(ValueError):
    pass


# -- velodyne binaries -------------------------------------------------------

def read_velodyne_bin(path) -> PointCloud:
    raw = open(path, "rb").read()
    if len(raw) % 16:
        offset = len(raw) - len(raw) % 16
        raise ParseError(f"{path}: truncated record at offset {offset}")
    rec = np.frombuffer(raw, dtype=_RECORD).reshape(-1, 4)
    finite = np.isfinite(rec).all(axis=1)
    if not finite.all():
        log.warning("%s: dropped %d points with non-finite values", path, int((~finite).sum()))
        rec = rec[finite]
    return PointCloud.from_arrays(rec[:, :3], intensity=rec[:, 3], sensor_id=0)


def write_velodyne_bin(cloud: PointCloud, path) -> None:
    rec = np.empty((len(cloud), 4), dtype=_RECORD)
    rec[:, :3] = cloud.xyz
    rec[:, 3] = cloud.intensity
    with open(path, "wb") as f:
        f.write(rec.tobytes())


# -- per-point integer files ---------------------------------------------------

def read_label_file(path) -> np.ndarray:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    try:
        return np.array([int(v) for v in lines], dtype=np.int32)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def write_label_file(labels, path) -> None:
    with open(path, "w") as f:
        f.writelines(f"{int(v)}\n" for v in np.asarray(labels).reshape(-1))


# -- calibration and labels ----------------------------------------------------

def _nearest_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True)
class Calibration:
    """Maps boxes annotated in the rectified camera frame into the LiDAR frame."""

    cam_to_lidar: SensorPose

    @classmethod
    def identity(cls) -> "Calibration":
        return cls(SensorPose.identity())

    @classmethod
    def from_velo_to_cam(cls, tr_velo_to_cam: np.ndarray, r0_rect: Optional[np.ndarray] = None,
                         tol: float = 1e-3) -> "Calibration":
        """Build from the devkit's ``Tr_velo_to_cam`` (3x4) and ``R0_rect`` (3x3).

        The devkit prints matrices to ~1e-7, which is not orthonormal to the
        pose tolerance, so the rotation is projected onto SO(3) after a
        coarse sanity check.
        """
        tr = np.asarray(tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
        r0 = np.eye(3) if r0_rect is None else np.asarray(r0_rect, dtype=np.float64).reshape(3, 3)
        rot = r0 @ tr[:, :3]
        trans = r0 @ tr[:, 3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > tol:
            raise ParseError("calibration rotation is far from orthonormal")
        lidar_to_cam = SensorPose(_nearest_rotation(rot), trans)
        return cls(lidar_to_cam.inverse())


def read_kitti_calib(path) -> Calibration:
    entries = {}
    with open(path) as f:
        for ln in f:
            if ":" not in ln:
                continue
            key, vals = ln.split(":", 1)
            try:
                entries[key.strip()] = np.array([float(v) for v in vals.split()])
            except ValueError:
                raise ParseError(f"{path}: bad numeric values for {key.strip()}") from None
    tr = entries.get("Tr_velo_to_cam", entries.get("Tr_velo_cam"))
    if tr is None or tr.size != 12:
        raise ParseError(f"{path}: missing Tr_velo_to_cam")
    r0 = entries.get("R0_rect", entries.get("R_rect"))
    if r0 is not None and r0.size != 9:
        raise ParseError(f"{path}: R0_rect needs 9 values")
    return Calibration.from_velo_to_cam(tr, r0)


def kitti_box_to_lidar(h, w, l, loc, ry, calib: Calibration, class_id: int) -> OrientedBox3D:
    """Camera-frame KITTI box (bottom-centre location, y pointing down) to a LiDAR box."""
    center_cam = np.array([loc[0], loc[1] - h / 2.0, loc[2]])
    heading_cam = np.array([math.cos(ry), 0.0, -math.sin(ry)])
    pose = calib.cam_to_lidar
    center = pose.apply(center_cam)
    heading = pose.rotation @ heading_cam
    yaw = math.atan2(heading[1], heading[0])
    return OrientedBox3D(tuple(center), (l, w, h), yaw, class_id)


def read_kitti_labels(path, calib: Calibration, class_map: Mapping[str, int] = KITTI_CLASS_MAP):
    boxes = []
    with open(path) as f:
        for lineno, ln in enumerate(f, 1):
            parts = ln.split()
            if not parts:
                continue
            name = parts[0]
            if name == "DontCare":
                continue
            if len(parts) < 15:
                raise ParseError(f"{path}:{lineno}: expected 15 fields, got {len(parts)}")
            try:
                h, w, l, x, y, z, ry = (float(v) for v in parts[8:15])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric box field") from None
            if name not in class_map:
                log.warning("%s:%d: skipping unknown class %r", path, lineno, name)
                continue
            try:
                boxes.append(kitti_box_to_lidar(h, w, l, (x, y, z), ry, calib, class_map[name]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return boxes


# -- layers --------------------------------------------------------------------

def layer_binning(cloud: PointCloud, n_layers: int, elev_range=HDL64_ELEV_RANGE,
                  passthrough: bool = False) -> PointCloud:
    """Assign each point a layer by uniform binning of its elevation angle.

    With ``passthrough`` the cloud's native layer indices are kept.
    """
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    lo, hi = elev_range
    if not lo < hi:
        raise ValueError("elev_range must be increasing")
    if passthrough:
        return cloud
    x, y, z = cloud.xyz.T
    planar = np.hypot(x, y)
    at_origin = (planar == 0) & (z == 0)
    if at_origin.any():
        log.warning("%d points at the origin have no elevation, assigned layer 0", int(at_origin.sum()))
    elev = np.arctan2(z, planar)
    layer = np.floor((elev - lo) / (hi - lo) * n_layers)
    layer = np.clip(layer, 0, n_layers - 1).astype(np.int32)
    layer[at_origin] = 0
    return cloud.replace(layer=layer)


def camera_fov_mask(cloud: PointCloud, fov: float = math.pi / 2) -> np.ndarray:
    """Points ahead of the vehicle within +-fov/2 of the x axis."""
    x, y = cloud.xyz[:, 0], cloud.xyz[:, 1]
    return (x > 0) & (np.abs(np.arctan2(y, x)) <= fov / 2)


# -- pose files ----------------------------------------------------------------

def read_pose_file(path) -> dict[int, SensorPose]:
    poses = {}
    with open(path) as f:
        for lineno, ln in enumerate(f, 1):
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            parts = ln.split()
            if len(parts) != 7:
                raise ParseError(f"{path}:{lineno}: expected 'id tx ty tz roll pitch yaw'")
            try:
                sid = int(parts[0])
                tx, ty, tz, roll, pitch, yaw = (float(v) for v in parts[1:])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field") from None
            if sid in poses:
                raise ParseError(f"{path}:{lineno}: duplicate sensor id {sid}")
            try:
                poses[sid] = SensorPose(rotation_zyx(roll, pitch, yaw), (tx, ty, tz))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return poses


def write_pose_file(poses: Mapping[int, SensorPose], path) -> None:
    with open(path, "w") as f:
        f.write("# id tx ty tz roll pitch yaw\n")
        for sid in sorted(poses):
            p = poses[sid]
            vals = list(p.translation) + list(euler_zyx(p.rotation))
            f.write(f"{sid} " + " ".join(repr(float(v)) for v in vals) + "\n")


# -- PLY -----------------------------------------------------------------------

DEFAULT_PALETTE = {
    0: (128, 128, 128),
    1: (230, 25, 75),
    2: (60, 180, 75),
    3: (255, 225, 25),
    4: (0, 130, 200),
    5: (245, 130, 48),
    6: (145, 30, 180),
    7: (70, 240, 240),
    8: (240, 50, 230),
    9: (210, 245, 60),
    IGNORE_LABEL: (40, 40, 40),
}


def write_ply(cloud: PointCloud, path, palette: Optional[Mapping[int, tuple]] = None) -> None:
    """ASCII PLY coloured by label, or by sensor id for unlabelled clouds."""
    palette = DEFAULT_PALETTE if palette is None else palette
    keys = cloud.label if cloud.label is not None else cloud.sensor_id
    missing = set(np.unique(keys).tolist()) - set(palette)
    if missing:
        raise KeyError(f"palette has no colour for {sorted(missing)}")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        for (x, y, z), k in zip(cloud.xyz.astype(np.float32), keys):
            r, g, b = palette[int(k)]
            f.write(f"{x:.6g} {y:.6g} {z:.6g} {r} {g} {b}\n")


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# -- tensor dumps ----------------------------------------------------------------

def dump_tensor(array, path) -> None:
    """Raw little-endian float32 blob plus a ``<path>.json`` shape sidecar."""
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(a.tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump({"shape": list(a.shape), "dtype": "<f4"}, f)


def load_tensor(path) -> np.ndarray:
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    data = np.fromfile(path, dtype=meta["dtype"])
    if data.size != int(np.prod(meta["shape"])):
        raise ParseError(f"{path}: blob holds {data.size} values, sidecar says {meta['shape']}")
    return data.reshape(meta["shape"])
