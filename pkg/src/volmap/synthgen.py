"""Deterministic synthetic multi-LiDAR cocoon scenes.

Each sensor casts one ray per (ring, azimuth step) against yaw-only boxes
and a flat ground plane; the nearest hit inside ``max_range`` becomes a
point in that sensor's frame. Sensors never occlude one another, so a
sensor's cloud does not depend on which other sensors are present.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import OrientedBox3D, PointCloud, SensorPose

# keeps face hits strictly inside their box after frame round trips
_FACE_MARGIN = 1e-10

CLASS_DIMENSIONS = {
    "Car": (4.5, 1.8, 1.5),
    "Van": (5.0, 2.0, 2.2),
    "Truck": (9.0, 2.5, 3.2),
    "Pedestrian": (0.8, 0.6, 1.75),
    "Cyclist": (1.8, 0.6, 1.7),
}


@dataclass(frozen=True)
class SensorSpec:
    sensor_id: int
    name: str
    translation: tuple
    rpy: tuple = (0.0, 0.0, 0.0)
    n_layers: int = 8
    elev_range: tuple = (math.radians(-8.0), math.radians(2.0))
    azimuth_fov: tuple = (math.radians(-72.5), math.radians(72.5))
    angular_res: float = math.radians(0.5)
    max_range: float = 40.0

    @property
    def pose(self) -> SensorPose:
        return SensorPose.from_euler(self.translation, *self.rpy)

    def ring_elevations(self) -> np.ndarray:
        """Beam elevations at the centres of uniform bins over ``elev_range``."""
        lo, hi = self.elev_range
        return lo + (np.arange(self.n_layers) + 0.5) * (hi - lo) / self.n_layers

    def azimuths(self) -> np.ndarray:
        lo, hi = self.azimuth_fov
        n = int(math.floor((hi - lo) / self.angular_res + 1e-9)) + 1
        return lo + np.arange(n) * self.angular_res

    def to_json(self) -> dict:
        return {"sensor_id": self.sensor_id, "name": self.name, "translation": list(self.translation),
                "rpy": list(self.rpy), "n_layers": self.n_layers, "elev_range": list(self.elev_range),
                "azimuth_fov": list(self.azimuth_fov), "angular_res": self.angular_res,
                "max_range": self.max_range}

    @classmethod
    def from_json(cls, d) -> "SensorSpec":
        d = dict(d)
        for k in ("translation", "rpy", "elev_range", "azimuth_fov"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)


def default_cocoon(**overrides) -> list[SensorSpec]:
    """Five bumper-height sensors around a ~4.6 m car, ids 1..5 named S1..S5.

    S1 front-left, S2 rear-left, S3 rear, S4 rear-right, S5 front-right.
    Placements are plausible, not measured.
    """
    deg = math.radians
    mounts = [
        (1, (2.3, 0.8, 0.5), deg(35)),
        (2, (-2.3, 0.8, 0.5), deg(145)),
        (3, (-2.4, 0.0, 0.5), deg(180)),
        (4, (-2.3, -0.8, 0.5), deg(-145)),
        (5, (2.3, -0.8, 0.5), deg(-35)),
    ]
    return [SensorSpec(sid, f"S{sid}", t, (0.0, 0.0, yaw), **overrides) for sid, t, yaw in mounts]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    obstacles: tuple = ()
    sensors: tuple = field(default_factory=lambda: tuple(default_cocoon()))
    ground_z: Optional[float] = 0.0
    ground_intensity: float = 0.15
    class_intensity: dict = field(default_factory=lambda: {1: 0.55, 2: 0.85})
    noise: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "sensors", tuple(self.sensors))
        ids = [s.sensor_id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sensor ids in scene")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "obstacles": [{"center": list(b.center), "dimensions": list(b.dimensions), "yaw": b.yaw,
                           "class_id": b.class_id} for b in self.obstacles],
            "sensors": [s.to_json() for s in self.sensors],
            "ground_z": self.ground_z,
            "ground_intensity": self.ground_intensity,
            "class_intensity": {str(k): v for k, v in self.class_intensity.items()},
            "noise": self.noise,
        }

    @classmethod
    def from_json(cls, d) -> "SceneSpec":
        kw = dict(d)
        kw["obstacles"] = [OrientedBox3D(**b) for b in d.get("obstacles", [])]
        if "sensors" in d:
            kw["sensors"] = [SensorSpec.from_json(s) for s in d["sensors"]]
        if "class_intensity" in d:
            kw["class_intensity"] = {int(k): float(v) for k, v in d["class_intensity"].items()}
        return cls(**kw)


def _ray_box(origin: np.ndarray, dirs: np.ndarray, box: OrientedBox3D) -> np.ndarray:
    """Entry distance of each ray into ``box`` (inf when missed)."""
    o = box.to_box_frame(origin[None])[0]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)
    half = np.asarray(box.dimensions) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    parallel = d == 0
    outside = np.abs(o) > half
    t1 = np.where(parallel, np.where(outside, np.inf, -np.inf), t1)
    t2 = np.where(parallel, np.inf, t2)
    tnear = np.minimum(t1, t2).max(axis=1)
    tfar = np.maximum(t1, t2).min(axis=1)
    hit = (tnear <= tfar) & (tnear > 0)
    return np.where(hit, tnear, np.inf)


def _cast(sensor: SensorSpec, spec: SceneSpec) -> tuple[PointCloud, np.ndarray]:
    """One sensor's cloud in its own frame plus the obstacle index per point (-1 for ground)."""
    pose = sensor.pose
    elev = sensor.ring_elevations()
    az = sensor.azimuths()
    ee, aa = np.meshgrid(elev, az, indexing="ij")
    ring = np.repeat(np.arange(sensor.n_layers), len(az))
    local = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)
    dirs = local @ pose.rotation.T
    origin = pose.translation

    best_t = np.full(len(dirs), np.inf)
    best_obj = np.full(len(dirs), -2, dtype=np.int64)
    if spec.ground_z is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = (spec.ground_z - origin[2]) / dirs[:, 2]
        tg = np.where((dirs[:, 2] < 0) & (tg > 0), tg, np.inf)
        best_obj[tg < best_t] = -1
        best_t = np.minimum(best_t, tg)
    for i, box in enumerate(spec.obstacles):
        tb = _ray_box(origin, dirs, box)
        closer = tb < best_t
        best_obj[closer] = i
        best_t = np.where(closer, tb, best_t)
    hit = best_t <= sensor.max_range
    t, obj, dirs, ring = best_t[hit], best_obj[hit], dirs[hit], ring[hit]

    pts = origin + t[:, None] * dirs
    if spec.ground_z is not None:
        pts[obj == -1, 2] = spec.ground_z
    labels = np.zeros(len(pts), dtype=np.int32)
    base = np.full(len(pts), spec.ground_intensity)
    for i, box in enumerate(spec.obstacles):
        sel = obj == i
        if not sel.any():
            continue
        half = np.asarray(box.dimensions) / 2 - _FACE_MARGIN
        inside = np.clip(box.to_box_frame(pts[sel]), -half, half)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        pts[sel] = np.stack([c * inside[:, 0] - s * inside[:, 1],
                             s * inside[:, 0] + c * inside[:, 1], inside[:, 2]], axis=1) + box.center
        labels[sel] = box.class_id
        base[sel] = spec.class_intensity.get(box.class_id, 0.5)

    rng = np.random.default_rng([spec.seed, sensor.sensor_id])
    intensity = np.clip(base + rng.uniform(-spec.noise, spec.noise, len(pts)), 0.0, 1.0)
    sensor_xyz = pose.inverse().apply(pts) if len(pts) else pts
    cloud = PointCloud.from_arrays(sensor_xyz, intensity, ring, sensor.sensor_id, labels)
    return cloud, obj


def generate(spec: SceneSpec) -> list[tuple[PointCloud, SensorPose]]:
    return [(_cast(s, spec)[0], s.pose) for s in spec.sensors]


def generate_with_instances(spec: SceneSpec) -> list[tuple[PointCloud, SensorPose, np.ndarray]]:
    """Like :func:`generate` plus the hit obstacle index per point (-1 ground)."""
    out = []
    for s in spec.sensors:
        cloud, obj = _cast(s, spec)
        out.append((cloud, s.pose, obj))
    return out


def sensor_subset(frames, ids):
    """Restrict to points whose sensor id is in ``ids``.

    ``frames`` is a fused :class:`PointCloud` or a list of (cloud, pose, ...)
    entries; list entries are kept in place with their clouds filtered, so
    a sensor outside ``ids`` contributes an empty cloud.
    """
    ids = np.asarray(sorted(set(ids)), dtype=np.int64)
    if isinstance(frames, PointCloud):
        return frames.subset(np.isin(frames.sensor_id, ids))
    out = []
    for entry in frames:
        keep = np.isin(entry[0].sensor_id, ids)
        out.append((entry[0].subset(keep),) + tuple(
            e[keep] if isinstance(e, np.ndarray) else e for e in entry[1:]))
    return out


def random_scene(seed: int, n_obstacles=(4, 8), classes=None, sensors: Optional[Sequence[SensorSpec]] = None,
                 x_range=(-28.0, 28.0), y_range=(-18.0, 18.0), ground_z: Optional[float] = 0.0, **kw) -> SceneSpec:
    """Non-overlapping obstacles resting on the ground around the ego car."""
    classes = {"Car": 1, "Truck": 2} if classes is None else classes
    rng = np.random.default_rng([seed, 0x5CE7E])
    lo, hi = n_obstacles if isinstance(n_obstacles, (tuple, list)) else (n_obstacles, n_obstacles)
    n = int(rng.integers(lo, hi + 1))
    names = sorted(classes, key=classes.get)
    placed: list[OrientedBox3D] = []
    attempts = 0
    while len(placed) < n and attempts < 1000:
        attempts += 1
        name = names[int(rng.integers(len(names)))]
        dims = np.asarray(CLASS_DIMENSIONS.get(name, (4.0, 2.0, 1.6))) * rng.uniform(0.9, 1.1, 3)
        cx, cy = rng.uniform(*x_range), rng.uniform(*y_range)
        radius = math.hypot(dims[0], dims[1]) / 2
        if abs(cx) < 3.0 + radius and abs(cy) < 1.5 + radius:
            continue
        if any(math.hypot(cx - b.center[0], cy - b.center[1])
               < radius + math.hypot(*b.dimensions[:2]) / 2 + 0.5 for b in placed):
            continue
        yaw = rng.uniform(-math.pi, math.pi)
        placed.append(OrientedBox3D((cx, cy, (ground_z or 0.0) + dims[2] / 2), tuple(dims), yaw, classes[name]))
    if sensors is None:
        sensors = default_cocoon()
    return SceneSpec(seed, placed, tuple(sensors), ground_z, **kw)


def with_sensors(spec: SceneSpec, ids) -> SceneSpec:
    ids = set(ids)
    return replace(spec, sensors=tuple(s for s in spec.sensors if s.sensor_id in ids))


_SET_KEYS = ("n_frames", "n_obstacles", "classes", "x_range", "y_range")


def scenes_from_json(d) -> list[SceneSpec]:
    """A scene file holds one explicit scene (with ``obstacles``) or a seeded set.

    A set uses ``seed`` and ``n_frames`` (default 1); frame k is
    ``random_scene(seed + k)`` with any of ``n_obstacles``, ``classes``,
    ``x_range``, ``y_range`` and the regular scene fields applied.
    """
    d = dict(d)
    if "obstacles" in d:
        if d.pop("n_frames", 1) != 1:
            raise ValueError("a scene with explicit obstacles describes exactly one frame")
        return [SceneSpec.from_json(d)]
    if "seed" not in d:
        raise ValueError("scene file needs a seed")
    n = int(d.pop("n_frames", 1))
    if n < 1:
        raise ValueError("n_frames must be >= 1")
    kw = {k: d.pop(k) for k in _SET_KEYS[1:] if k in d}
    for k in ("n_obstacles", "x_range", "y_range"):
        if k in kw:
            kw[k] = tuple(kw[k])
    if "classes" in kw:
        kw["classes"] = {str(k): int(v) for k, v in kw["classes"].items()}
    base = SceneSpec.from_json({"seed": d.pop("seed"), **d})
    return [random_scene(base.seed + k, sensors=base.sensors, ground_z=base.ground_z,
                         ground_intensity=base.ground_intensity, class_intensity=base.class_intensity,
                         noise=base.noise, **kw) for k in range(n)]
