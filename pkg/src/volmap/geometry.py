"""Point clouds, rigid sensor poses and yaw-only oriented boxes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

IGNORE_LABEL = 255

_ORTHO_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Columnar point set.

    ``xyz`` is (N, 3) float64, ``intensity`` (N,) float32, ``layer`` and
    ``sensor_id`` (N,) int32. ``label`` is optional (N,) int32; 255 marks
    ignored points. Arrays are read-only once wrapped.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    layer: np.ndarray
    sensor_id: np.ndarray
    label: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        cols = {
            "intensity": np.array(self.intensity, dtype=np.float32).reshape(-1),
            "layer": np.array(self.layer, dtype=np.int32).reshape(-1),
            "sensor_id": np.array(self.sensor_id, dtype=np.int32).reshape(-1),
        }
        if self.label is not None:
            cols["label"] = np.array(self.label, dtype=np.int32).reshape(-1)
        for name, col in cols.items():
            if len(col) != n:
                raise ValueError(f"column {name!r} has {len(col)} entries, expected {n}")
        if n and (cols["layer"].min() < 0 or cols["sensor_id"].min() < 0):
            raise ValueError("layer and sensor_id must be non-negative")
        object.__setattr__(self, "xyz", _frozen(xyz))
        for name, col in cols.items():
            object.__setattr__(self, name, _frozen(col))

    @classmethod
    def from_arrays(cls, xyz, intensity=None, layer=None, sensor_id=0, label=None):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        if intensity is None:
            intensity = np.zeros(n, np.float32)
        if layer is None:
            layer = np.zeros(n, np.int32)
        if np.isscalar(sensor_id):
            sensor_id = np.full(n, sensor_id, np.int32)
        return cls(xyz, intensity, layer, sensor_id, label)

    @classmethod
    def empty(cls, with_label: bool = False) -> "PointCloud":
        return cls.from_arrays(np.zeros((0, 3)), label=np.zeros(0, np.int32) if with_label else None)

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def has_labels(self) -> bool:
        return self.label is not None

    def replace(self, **changes) -> "PointCloud":
        fields = dict(xyz=self.xyz, intensity=self.intensity, layer=self.layer,
                      sensor_id=self.sensor_id, label=self.label)
        fields.update(changes)
        return PointCloud(**fields)

    def subset(self, index) -> "PointCloud":
        """Rows selected by an index array or boolean mask."""
        return PointCloud(
            self.xyz[index], self.intensity[index], self.layer[index],
            self.sensor_id[index], None if self.label is None else self.label[index],
        )

    @staticmethod
    def concat(clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        labelled = [c.label is not None for c in clouds]
        if any(labelled) and not all(labelled):
            raise ValueError("cannot concatenate labelled and unlabelled clouds")
        return PointCloud(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.intensity for c in clouds]),
            np.concatenate([c.layer for c in clouds]),
            np.concatenate([c.sensor_id for c in clouds]),
            np.concatenate([c.label for c in clouds]) if all(labelled) else None,
        )


def rotation_zyx(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def euler_zyx(rotation: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_zyx`, returns (roll, pitch, yaw)."""
    r = np.asarray(rotation, dtype=np.float64)
    pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    if abs(r[2, 0]) < 1 - 1e-12:
        roll = math.atan2(r[2, 1], r[2, 2])
        yaw = math.atan2(r[1, 0], r[0, 0])
    else:  # gimbal lock, fold everything into yaw
        roll = 0.0
        yaw = math.atan2(-r[0, 1], r[1, 1])
    return roll, pitch, yaw


@dataclass(frozen=True, eq=False)
class SensorPose:
    """Rigid transform ``p_ref = rotation @ p_sensor + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("pose contains non-finite values")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err >= _ORTHO_TOL or np.linalg.det(r) <= 0:
            raise ValueError(f"rotation is not a proper orthonormal matrix (|R^T R - I| = {err:.3g})")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "SensorPose":
        return cls()

    @classmethod
    def from_euler(cls, translation, roll=0.0, pitch=0.0, yaw=0.0) -> "SensorPose":
        return cls(rotation_zyx(roll, pitch, yaw), translation)

    def inverse(self) -> "SensorPose":
        rt = self.rotation.T
        return SensorPose(rt, -rt @ self.translation)

    def compose(self, other: "SensorPose") -> "SensorPose":
        """``self ∘ other``: apply ``other`` first."""
        return SensorPose(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.remainder(a, 2 * math.pi)
    return math.pi if a == -math.pi else a


@dataclass(frozen=True)
class OrientedBox3D:
    center: tuple
    dimensions: tuple  # (length, width, height)
    yaw: float
    class_id: int

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        d = tuple(float(v) for v in self.dimensions)
        if len(c) != 3 or len(d) != 3:
            raise ValueError("center and dimensions must have 3 components")
        if not all(math.isfinite(v) for v in c + d + (self.yaw,)):
            raise ValueError("box has non-finite fields")
        if min(d) <= 0:
            raise ValueError(f"box dimensions must be positive, got {d}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dimensions", d)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def volume(self) -> float:
        length, width, height = self.dimensions
        return length * width * height

    def to_box_frame(self, xyz: np.ndarray) -> np.ndarray:
        """Translate by -center then rotate by -yaw."""
        p = np.asarray(xyz, dtype=np.float64) - np.asarray(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(p)
        out[..., 0] = c * p[..., 0] + s * p[..., 1]
        out[..., 1] = -s * p[..., 0] + c * p[..., 1]
        out[..., 2] = p[..., 2]
        return out

    def transformed(self, pose: SensorPose) -> "OrientedBox3D":
        """The same box expressed in the frame ``pose`` maps into.

        Only rotations about the up axis keep a box yaw-only; anything else
        is rejected.
        """
        r = pose.rotation
        if abs(r[2, 2] - 1.0) > 1e-9:
            raise ValueError("pose tilts the up axis; boxes are yaw-only")
        center = pose.apply(np.asarray(self.center))
        yaw = self.yaw + math.atan2(r[1, 0], r[0, 0])
        return OrientedBox3D(tuple(center), self.dimensions, yaw, self.class_id)

    def corners(self) -> np.ndarray:
        length, width, height = self.dimensions
        sx = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * length / 2
        sy = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * width / 2
        sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * height / 2
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * sx - s * sy + self.center[0]
        y = s * sx + c * sy + self.center[1]
        return np.stack([x, y, sz + self.center[2]], axis=1)


def points_in_box(xyz: np.ndarray, box: OrientedBox3D) -> np.ndarray:
    """Boolean mask of points inside the closed box."""
    local = box.to_box_frame(np.asarray(xyz, dtype=np.float64).reshape(-1, 3))
    half = np.asarray(box.dimensions) / 2
    return np.all(np.abs(local) <= half, axis=1)


def point_in_box(p, box: OrientedBox3D) -> bool:
    return bool(points_in_box(np.asarray(p, dtype=np.float64)[:3], box)[0])


def _check_finite(xyz: np.ndarray) -> None:
    bad = ~np.isfinite(xyz).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"point {i} has a non-finite coordinate: {xyz[i].tolist()}")


def transform_points(cloud: PointCloud, pose: SensorPose) -> PointCloud:
    _check_finite(cloud.xyz)
    return cloud.replace(xyz=pose.apply(cloud.xyz))


def cloud_sensor_id(cloud: PointCloud) -> Optional[int]:
    ids = np.unique(cloud.sensor_id)
    if len(ids) > 1:
        raise ValueError(f"cloud mixes sensor ids {ids.tolist()}")
    return int(ids[0]) if len(ids) else None


def fuse(clouds: Iterable[tuple[PointCloud, SensorPose]]) -> PointCloud:
    """Transform every sensor cloud into the reference frame and stack them."""
    seen = set()
    out = []
    for cloud, pose in clouds:
        sid = cloud_sensor_id(cloud)
        if sid is not None:
            if sid in seen:
                raise ValueError(f"duplicate sensor_id {sid}")
            seen.add(sid)
        out.append(transform_points(cloud, pose))
    return PointCloud.concat(out)
