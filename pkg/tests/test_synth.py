import numpy as np
import pytest

from lidarsem.errors import ConfigError
from lidarsem.scan_io import DYNAMIC, MOVABLE, NON_MOVABLE
from lidarsem.synth import (RayPattern, SceneBox, SceneConfig, Trajectory, benchmark_scene,
                            load_scene_config, odometry, synth_scene)

from oracles import ray_box_entry


def small_rays(**kw):
    return RayPattern(n_rings=16, n_azimuth=90, **kw)


def test_ground_only_scene_is_all_non_movable():
    cloud, gt, _ = synth_scene(SceneConfig(rays=small_rays()), 0)
    assert len(cloud) > 0
    assert np.all(gt.labels == NON_MOVABLE)
    # every point lies on the plane z = -1.73 in the sensor frame
    assert np.abs(cloud.xyz[:, 2] + 1.73).max() < 1e-9


def test_moving_box_points_are_dynamic_every_frame():
    box = SceneBox("moving", (8, 0, 0.75), (2, 2, 1.5), velocity=(1, 0, 0))
    cfg = SceneConfig(boxes=[box], rays=small_rays())
    for t in range(3):
        cloud, gt, _ = synth_scene(cfg, t)
        on = gt.box_ids == 0
        assert on.sum() > 0
        assert np.all(gt.labels[on] == DYNAMIC)
        assert np.all(gt.labels[~on] == NON_MOVABLE)


def test_parked_box_occludes_wall():
    wall = SceneBox("static", (15, 0, 3), (1, 30, 6))
    car = SceneBox("parked", (6, 0, 1), (2, 2, 2))
    cfg = SceneConfig(boxes=[wall, car], ground=False, rays=RayPattern(n_rings=32, n_azimuth=180))
    cloud, gt, pose = synth_scene(cfg, 0)
    dirs = cfg.rays.directions()
    origin = pose.translation
    # oracle: the nearest of the two face-plane intersections decides each ray
    expect = {}
    for r, d in enumerate(dirs):
        tw = ray_box_entry(origin, d, np.array(wall.center), wall.extents, 0.0)
        tc = ray_box_entry(origin, d, np.array(car.center), car.extents, 0.0)
        if min(tw, tc) < np.inf:
            expect[r] = (MOVABLE if tc < tw else NON_MOVABLE, min(tw, tc))
    assert sorted(expect) == sorted(cloud.ray_index.tolist())
    for k, r in enumerate(cloud.ray_index):
        lab, dist = expect[int(r)]
        assert gt.labels[k] == lab
        assert abs(np.linalg.norm(cloud.xyz[k]) - dist) < 1e-9
    assert np.sum(gt.labels == MOVABLE) > 0


def test_points_lie_on_declared_surfaces():
    cfg = benchmark_scene(n_azimuth=200)
    cloud, gt, pose = synth_scene(cfg, 3)
    world = pose.apply(cloud.xyz)
    # every point is within 1e-9 of the ground or the surface of some box
    dist = np.abs(world[:, 2] - cfg.ground_z)
    for box in cfg.boxes:
        c, yaw = box.at(3)
        co, si = np.cos(yaw), np.sin(yaw)
        d = world - c
        local = np.stack([co * d[:, 0] + si * d[:, 1], -si * d[:, 0] + co * d[:, 1], d[:, 2]], axis=1)
        half = np.asarray(box.extents) / 2
        outside = np.maximum(np.abs(local) - half, 0)
        inside_gap = np.min(half - np.abs(local), axis=1)
        surf = np.where(np.any(outside > 0, axis=1), np.linalg.norm(outside, axis=1), np.abs(inside_gap))
        dist = np.minimum(dist, surf)
    assert dist.max() < 1e-9


def test_odometry_moves_static_points_between_frames():
    cfg = benchmark_scene(n_azimuth=120)
    cfg.trajectory = Trajectory(velocity=(0.5, 0.1, 0), yaw_rate=0.02)
    _, _, p0 = synth_scene(cfg, 0)
    _, _, p1 = synth_scene(cfg, 1)
    x = np.array([[3.0, 1.0, -1.0]])
    np.testing.assert_allclose(odometry(p0, p1).apply(x), p1.inverse().apply(p0.apply(x)), atol=1e-12)


def test_empty_scene_and_zero_rays_are_config_errors():
    with pytest.raises(ConfigError):
        synth_scene(SceneConfig(ground=False), 0)
    with pytest.raises(ConfigError):
        synth_scene(SceneConfig(rays=RayPattern(n_rings=0)), 0)


def test_scene_config_file(tmp_path):
    p = tmp_path / "scene.yaml"
    p.write_text(
        "scene:\n"
        "  boxes:\n"
        "    - {kind: parked, center: [5, 0, 1], extents: [2, 2, 2], difficulty: hard}\n"
        "  rays: {n_rings: 8, n_azimuth: 60}\n"
    )
    cfg = load_scene_config(p)
    assert cfg.boxes[0].difficulty == "hard"
    _, gt, _ = synth_scene(cfg, 0)
    assert gt.boxes[0].difficulty == "hard"


def test_noise_is_seeded():
    cfg = benchmark_scene(n_azimuth=100)
    a, _, _ = synth_scene(cfg, 2)
    b, _, _ = synth_scene(cfg, 2)
    np.testing.assert_array_equal(a.intensity, b.intensity)
