import math

import numpy as np
import pytest

from lidarsem.errors import DataError
from lidarsem.geometry import Pose
from lidarsem.rigid_flow import (FlowConfig, MotionField, RangeLookup, build_graph, energy, energy_terms,
                                 estimate_flow, minimize, segment_ground, segment_shifts, select_keypoints,
                                 write_motion_csv)
from lidarsem.synth import RayPattern, SceneBox, SceneConfig, Trajectory, odometry, synth_scene

from oracles import flow_energy

CAR = dict(extents=(4.2, 1.8, 1.5), intensity=0.7)


def box_surface(center=(0, 0, 0), extents=(2.0, 1.0, 1.0), step=0.05):
    """Points on a grid over every face of an axis-aligned box."""
    half = np.asarray(extents) / 2
    pts = []
    for ax in range(3):
        a, b = [k for k in range(3) if k != ax]
        ga = np.arange(-half[a], half[a] + 1e-9, step)
        gb = np.arange(-half[b], half[b] + 1e-9, step)
        A, B = np.meshgrid(ga, gb, indexing="ij")
        for sgn in (-1, 1):
            p = np.zeros((A.size, 3))
            p[:, a], p[:, b], p[:, ax] = A.ravel(), B.ravel(), sgn * half[ax]
            pts.append(p)
    return np.unique(np.round(np.vstack(pts), 9), axis=0) + center


def edge_distance(pts, extents):
    """Distance from points on a box surface to its nearest edge."""
    half = np.asarray(extents) / 2
    gap = half - np.abs(pts)
    # on a face one coordinate has gap 0; the edge is reached when another one does
    return np.sort(gap, axis=1)[:, 1]


def moving_box_scene(n_az=600, cy=4.0, sensor_v=0.3):
    return SceneConfig(
        boxes=[SceneBox("static", (0.0, 11.0, 3.0), (60.0, 1.0, 6.0)),
               SceneBox("static", (3.0, -9.0, 2.0), (0.4, 0.4, 4.0)),
               SceneBox("moving", (-8.0, cy, 0.95), velocity=(1.0, 0.0, 0.0), **CAR)],
        rays=RayPattern(n_azimuth=n_az, max_range=25.0),
        trajectory=Trajectory(velocity=(sensor_v, 0.0, 0.0)),
    )


def true_motion(cfg, c0, g0, p0, p1, box=2):
    """Per-point target positions in the second sensor frame."""
    tgt = odometry(p0, p1).apply(c0.xyz)
    on = g0.box_ids == box
    tgt[on] = p1.inverse().apply(p0.apply(c0.xyz[on]) + np.asarray(cfg.boxes[box].velocity))
    return tgt, on


def test_keypoints_concentrate_on_box_edges():
    ext = (2.0, 1.0, 1.0)
    pts = box_surface(extents=ext)
    kp = select_keypoints(pts, FlowConfig())
    assert not kp.fallback and len(kp.indices) >= 10
    assert np.mean(edge_distance(pts[kp.indices], ext) <= 0.2) >= 0.8


def test_plane_takes_uniform_fallback():
    g = np.arange(0, 5, 0.1)
    X, Y = np.meshgrid(g, g)
    plane = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    kp = select_keypoints(plane, FlowConfig())
    assert kp.fallback and len(kp.indices) >= FlowConfig().min_keypoints


def test_too_few_points_for_keypoints():
    with pytest.raises(DataError):
        select_keypoints(np.random.default_rng(0).normal(size=(5, 3)), FlowConfig(min_keypoints=10))


def test_two_point_graph_has_one_edge():
    xyz = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    g = build_graph(xyz, [0], xyz, FlowConfig(k=1, search_radius=0))
    np.testing.assert_array_equal(g.edges, [[0, 1]])


def test_knn_degree_and_empty_second_scan():
    xyz = np.random.default_rng(1).normal(size=(1000, 3))
    g = build_graph(xyz, [0, 1], xyz, FlowConfig(k=6, search_radius=0))
    deg = np.bincount(g.edges.ravel(), minlength=1000)
    assert deg.min() >= 6
    assert np.all(g.edges[:, 0] < g.edges[:, 1])
    with pytest.raises(DataError):
        build_graph(xyz, [0], np.zeros((0, 3)))


def test_identical_scans_correspond_to_themselves():
    pts = box_surface()
    kp = select_keypoints(pts)
    g = build_graph(pts, kp, pts, FlowConfig())
    np.testing.assert_array_equal(g.targets, pts[kp.indices])
    ident = MotionField.identity(len(pts))
    assert energy(ident, g) == 0.0
    shifted = MotionField.constant(len(pts), Pose.from_rotvec([0, 0, 0.1], [0.2, 0, 0]))
    data, reg = energy_terms(shifted, g)
    # a constant field has no regularizer cost; the anchor pulls toward identity though
    assert data > 0 and abs(energy(shifted, g) - data - reg) < 1e-12


def test_energy_matches_term_by_term_sum():
    rng = np.random.default_rng(2)
    pts = box_surface(step=0.2)
    cfg = FlowConfig()
    g = build_graph(pts, select_keypoints(pts, cfg), pts + [0.1, 0, 0], cfg)
    tw = rng.normal(scale=0.05, size=(len(pts), 6))
    f = MotionField(np.stack([Pose.from_twist(v).rotation for v in tw]),
                    np.stack([Pose.from_twist(v).translation for v in tw]))
    ref = flow_energy(f.R, f.t, g.sources, g.targets, g.keypoints, g.edges, g.lambda_d, g.lambda_p,
                      g.rot_weight, g.data_scale, g.reg_scale, (g.anchor_R, g.anchor_t),
                      np.r_[[g.lambda_a] * 3, [g.lambda_a_rot] * 3])
    assert abs(energy(f, g) - ref) < 1e-9 * max(1.0, ref)


def test_improper_transform_is_rejected():
    pts = box_surface(step=0.25)
    g = build_graph(pts, select_keypoints(pts), pts)
    f = MotionField.identity(len(pts))
    f.R[0] = np.diag([1, 1, -1.0])
    with pytest.raises(DataError):
        energy(f, g)


def test_identical_scans_stay_at_identity():
    pts = box_surface(step=0.1)
    cfg = FlowConfig()
    kp = select_keypoints(pts, cfg)
    res = minimize(build_graph(pts, kp, pts, cfg), init=MotionField.identity(len(pts)), cfg=cfg)
    assert res.iterations <= 1
    assert np.abs(res.t).max() < 1e-9 and np.abs(res.R - np.eye(3)).max() < 1e-9


def test_static_scene_follows_odometry():
    cfg = SceneConfig(boxes=moving_box_scene().boxes[:2], rays=RayPattern(n_azimuth=600, max_range=25.0),
                      trajectory=Trajectory(velocity=(0.4, 0.1, 0.0), yaw_rate=0.02))
    c0, _, p0 = synth_scene(cfg, 0)
    c1, _, p1 = synth_scene(cfg, 1)
    odom = odometry(p0, p1)
    f = estimate_flow(c0, c1, FlowConfig(), MotionField.constant(len(c0), odom))
    assert f.is_rigid(1e-9)
    err_t = np.linalg.norm(f.t - odom.translation, axis=1)
    ang = np.array([np.linalg.norm(Pose(R @ odom.rotation.T, np.zeros(3)).log()[3:]) for R in f.R])
    assert err_t.max() < 0.05 and np.degrees(ang).max() < 0.5


@pytest.fixture(scope="module")
def moving_pair():
    cfg = moving_box_scene()
    c0, g0, p0 = synth_scene(cfg, 0)
    c1, _, p1 = synth_scene(cfg, 1)
    odom = odometry(p0, p1)
    f = estimate_flow(c0, c1, FlowConfig(), MotionField.constant(len(c0), odom))
    tgt, on = true_motion(cfg, c0, g0, p0, p1)
    return c0, c1, odom, f, tgt, on


def test_moving_box_is_recovered(moving_pair):
    c0, _, _, f, tgt, on = moving_pair
    err = np.linalg.norm(f.apply(c0.xyz) - tgt, axis=1)
    assert err[on].mean() < 0.05
    assert err[~on].mean() < 0.05


def test_energy_never_rises_within_a_stage(moving_pair):
    f = moving_pair[3]
    assert len(f.energies) > 1
    for stage in f.stage_energies():
        assert np.all(np.diff(stage) <= 1e-12 * max(stage[0], 1.0))


def test_regularizer_spreads_motion_to_non_keypoints(moving_pair):
    c0, _, _, f, tgt, on = moving_pair
    err = np.linalg.norm(f.apply(c0.xyz) - tgt, axis=1)
    is_kp = np.zeros(len(c0), bool)
    is_kp[f.keypoints.indices] = True
    kp_on = is_kp & on
    assert kp_on.any()
    bound = max(np.percentile(err[kp_on], 90), 0.05)
    assert np.percentile(err[on & ~is_kp], 90) <= 2 * bound


def test_rotating_both_scans_conjugates_the_field(moving_pair):
    c0, c1, odom, f, _, on = moving_pair
    Q = Pose.from_rotvec([0, 0, 0.5])
    odom_r = Q @ odom @ Q.inverse()
    g = estimate_flow(Q.apply(c0.xyz), Q.apply(c1.xyz), FlowConfig(), MotionField.constant(len(c0), odom_r))
    # tau' = Q tau Q^-1, so tau'(Q p) = Q tau(p)
    diff = np.linalg.norm(g.apply(Q.apply(c0.xyz)) - Q.apply(f.apply(c0.xyz)), axis=1)
    assert diff[on].mean() < 0.05 and diff[~on].mean() < 0.05


def test_ground_is_found_and_kept_at_init():
    cfg = SceneConfig(rays=RayPattern(n_rings=16, n_azimuth=180))
    c0, _, _ = synth_scene(cfg, 0)
    assert segment_ground(c0.xyz).all()
    init = MotionField.constant(len(c0), Pose.from_rotvec([0, 0, 0.01], [0.3, 0, 0]))
    f = estimate_flow(c0, c0, FlowConfig(), init)
    np.testing.assert_array_equal(f.t, init.t)


def test_segment_shift_finds_moving_box_and_spares_walls():
    cfg = moving_box_scene()
    c0, g0, p0 = synth_scene(cfg, 0)
    c1, _, p1 = synth_scene(cfg, 1)
    odom = odometry(p0, p1)
    ng = ~segment_ground(c0.xyz)
    sh = segment_shifts(c0.xyz[ng], c1.xyz, MotionField.constant(int(ng.sum()), odom), FlowConfig())
    on = g0.box_ids[ng] == 2
    assert np.abs(sh[on] - [1, 0, 0]).max() < 0.1
    assert np.abs(sh[~on]).max() == 0.0


def test_range_lookup_interpolates_along_rows():
    # a wall seen at grazing angles: ranges between returns come from interpolation
    cfg = SceneConfig(boxes=[SceneBox("static", (0.0, -6.0, 1.0), (60.0, 1.0, 6.0))], ground=False,
                      rays=RayPattern(n_azimuth=435, max_range=40.0))
    c, _, _ = synth_scene(cfg, 0)
    lk = RangeLookup(c.xyz)
    x = np.linspace(-15, 15, 61)
    probe = np.stack([x, np.full_like(x, -5.5), np.full_like(x, -0.5)], axis=1)
    near, far, in_view = lk.expected(probe)
    assert in_view.all()
    np.testing.assert_allclose(near, np.linalg.norm(probe, axis=1), atol=0.02)


def test_motion_csv(tmp_path):
    f = MotionField.constant(3, Pose.from_rotvec([0, 0, 0.5], [1, 2, 3]))
    write_motion_csv(tmp_path / "m.csv", f)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "index,tx,ty,tz,rx,ry,rz"
    assert lines[1] == "0,1.000000,2.000000,3.000000,0.000000,0.000000,0.500000"
    assert len(lines) == 4
