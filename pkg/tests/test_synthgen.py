import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volmap import synthgen
from volmap.geometry import OrientedBox3D, PointCloud, fuse, points_in_box
from volmap.synthgen import SceneSpec, SensorSpec


def test_no_obstacles_no_ground_is_empty():
    spec = SceneSpec(0, (), ground_z=None)
    assert all(len(c) == 0 for c, _ in synthgen.generate(spec))


def test_box_face_hit_is_analytic():
    # one horizontal ray along +x from the origin; box face at x = 10
    sensor = SensorSpec(1, "S1", (0.0, 0.0, 0.0), n_layers=1, elev_range=(-1e-3, 1e-3),
                        azimuth_fov=(0.0, 0.0), angular_res=0.01)
    box = OrientedBox3D((11.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.0, 1)
    (cloud, _), = synthgen.generate(SceneSpec(0, [box], [sensor], ground_z=None))
    assert len(cloud) == 1
    assert np.abs(cloud.xyz[0] - [10.0, 0.0, 0.0]).max() < 1e-9
    assert cloud.label[0] == 1 and cloud.layer[0] == 0


def test_box_ahead_is_hit_and_points_lie_inside():
    box = OrientedBox3D((12.0, 1.0, 0.8), (4.5, 1.8, 1.6), 0.3, 2)
    sensor = SensorSpec(1, "S1", (0.0, 0.0, 0.5))
    (cloud, pose), = synthgen.generate(SceneSpec(0, [box], [sensor]))
    fg = pose.apply(cloud.xyz[cloud.label == 2])
    assert len(fg) >= 1
    assert points_in_box(fg, box).all()


def test_max_range_and_ground():
    sensor = SensorSpec(1, "S1", (0.0, 0.0, 1.0), max_range=10.0)
    (cloud, pose), = synthgen.generate(SceneSpec(0, (), [sensor]))
    world = pose.apply(cloud.xyz)
    assert len(cloud) > 0 and (cloud.label == 0).all()
    assert np.abs(world[:, 2]).max() < 1e-12
    assert np.linalg.norm(cloud.xyz, axis=1).max() <= 10.0 + 1e-9


def test_intensity_model():
    spec = synthgen.random_scene(3)
    cloud = fuse(synthgen.generate(spec))
    for cls, base in [(0, 0.15), (1, 0.55), (2, 0.85)]:
        v = cloud.intensity[cloud.label == cls]
        assert len(v) and np.abs(v - base).max() <= 0.05 + 1e-6


def test_generation_is_deterministic():
    spec = synthgen.random_scene(11)
    a, b = fuse(synthgen.generate(spec)), fuse(synthgen.generate(synthgen.random_scene(11)))
    for f in ("xyz", "intensity", "layer", "sensor_id", "label"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_scene_json_round_trip():
    import json
    spec = synthgen.random_scene(5)
    again = SceneSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert again.to_json() == spec.to_json()


def test_sensor_subset_cases():
    frames = synthgen.generate(synthgen.random_scene(2))
    fused = fuse(frames)
    assert len(synthgen.sensor_subset(fused, [1, 2, 3, 4, 5])) == len(fused)
    assert len(synthgen.sensor_subset(fused, [])) == 0
    assert all(len(c) == 0 for c, _ in synthgen.sensor_subset(frames, []))
    assert len(synthgen.sensor_subset(fused, [1, 5])) <= len(fused)


def test_duplicate_sensor_ids():
    s = SensorSpec(1, "a", (0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        SceneSpec(0, (), [s, s])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fused_is_superset_of_each_sensor(seed):
    spec = synthgen.random_scene(seed)
    fused = fuse(synthgen.generate(spec))
    for sid in range(1, 6):
        alone = fuse(synthgen.generate(synthgen.with_sensors(spec, [sid])))
        mine = synthgen.sensor_subset(fused, [sid])
        assert np.array_equal(alone.xyz, mine.xyz) and np.array_equal(alone.label, mine.label)
        assert np.array_equal(alone.intensity, mine.intensity)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_foreground_points_inside_their_box(seed):
    spec = synthgen.random_scene(seed)
    for cloud, pose, obj in synthgen.generate_with_instances(spec):
        world = pose.apply(cloud.xyz)
        for i, box in enumerate(spec.obstacles):
            sel = obj == i
            assert points_in_box(world[sel], box).all()
            assert (cloud.label[sel] == box.class_id).all()
