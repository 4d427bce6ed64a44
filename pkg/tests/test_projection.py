import time

import numpy as np
import pytest

from lidarsem.projection import (HEIGHT, INTENSITY, RANGE, ProjectionConfig, back_project, pixel_coords,
                                 project, write_pgm)
from lidarsem.scan_io import PointCloud


def cloud(xyz, inten=None):
    xyz = np.asarray(xyz, float)
    return PointCloud(xyz, np.full(len(xyz), 0.5) if inten is None else inten)


def collision_free_cloud(cfg=ProjectionConfig(), seed=0):
    """One point at the centre of every other pixel, random range."""
    rng = np.random.default_rng(seed)
    rows, cols = np.meshgrid(np.arange(0, cfg.height, 2), np.arange(0, cfg.width, 3), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    d_el = (cfg.elev_max_deg - cfg.elev_min_deg) / cfg.height
    el = np.radians(cfg.elev_max_deg - (rows + 0.5) * d_el)
    az = np.radians(-180 + (cols + 0.5) * 360 / cfg.width)
    r = rng.uniform(2, 60, len(rows))
    xyz = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], 1) * r[:, None]
    return cloud(xyz), rows, cols


def test_default_dims():
    img, imap = project(cloud([[10, 0, 0]]))
    assert img.shape == (64, 870) and imap.shape == (64, 870)


def test_forward_point_lands_in_centre_column():
    # azimuth 0 -> floor(180 / 360 * 870) = 435
    row, col, rng = pixel_coords(np.array([[10.0, 0, 0]]))
    assert col[0] == 435 == 870 // 2
    # elevation 0 -> floor(2 / 26.8 * 64) = 4
    assert row[0] == 4
    assert rng[0] == 10


def test_nearer_point_wins_collision():
    img, imap = project(cloud([[7, 0, 0], [5, 0, 0]]))
    r, c = 4, 435
    assert img.data[r, c, RANGE] == 5
    assert imap.pixel_point[r, c] == 1


def test_equal_range_tie_goes_to_lower_index():
    img, imap = project(cloud([[5, 0, 0], [5, 0, 0]]))
    assert imap.pixel_point[4, 435] == 0


def test_channels():
    img, _ = project(cloud([[3, 4, 0.1]], [0.25]))
    (r, c) = np.argwhere(img.valid)[0]
    np.testing.assert_allclose(img.data[r, c], [np.sqrt(25.01), 0.25, 0.1])


def test_cloud_entirely_outside_span():
    img, imap = project(cloud([[3, 4, 0.5], [0, 0, -9]]))
    assert not img.valid.any() and imap.dropped == 2


def test_out_of_span_points_dropped_and_counted():
    img, imap = project(cloud([[1, 0, 5], [1, 0, -5], [10, 0, 0]]))
    assert imap.dropped == 2
    assert img.valid.sum() == 1
    assert list(imap.point_pixel[:2]) == [-1, -1]


def test_empty_cloud_is_all_invalid():
    img, imap = project(cloud(np.zeros((0, 3))))
    assert not img.valid.any() and imap.dropped == 0


def test_round_trip_ranges():
    c, rows, cols = collision_free_cloud()
    img, imap = project(c)
    assert np.array_equal(imap.point_pixel, rows * 870 + cols)
    back = back_project(imap, img.channel(RANGE))
    assert np.abs(back - np.linalg.norm(c.xyz, axis=1)).max() < 1e-6


def test_injective_pixel_map():
    rng = np.random.default_rng(1)
    xyz = rng.normal(size=(20000, 3)) * [20, 20, 1]
    _, imap = project(cloud(xyz))
    pp = imap.pixel_point[imap.pixel_point >= 0]
    assert len(pp) == len(np.unique(pp))
    won = imap.winners()
    assert np.all(imap.point_pixel[pp] == np.flatnonzero(imap.pixel_point.ravel() >= 0))
    assert won.sum() == len(pp)


def test_monotone_azimuth_along_ring():
    az = np.sort(np.random.default_rng(2).uniform(-np.pi, np.pi, 500))
    xyz = np.stack([np.cos(az), np.sin(az), np.zeros_like(az)], 1) * 10
    _, col, _ = pixel_coords(xyz)
    assert np.all(np.diff(col) >= 0)


def test_back_project_constant_and_loser():
    img, imap = project(cloud([[7, 0, 0], [5, 0, 0], [0, 9, 0]]))
    np.testing.assert_array_equal(back_project(imap, np.full((64, 870), 0.7)), [0.7] * 3)
    vals = np.arange(64 * 870, dtype=float).reshape(64, 870)
    out = back_project(imap, vals)
    assert out[0] == out[1] == vals[4, 435]


def test_back_project_shape_mismatch():
    _, imap = project(cloud([[7, 0, 0]]))
    with pytest.raises(ValueError):
        back_project(imap, np.zeros((32, 870)))


def test_projection_is_fast():
    c, _, _ = collision_free_cloud()
    big = cloud(np.tile(c.xyz, (8, 1)) * np.repeat(np.linspace(1, 1.5, 8), len(c))[:, None])
    t = time.perf_counter()
    project(big)
    assert time.perf_counter() - t < 1.0


def test_pgm_dump(tmp_path):
    img, _ = project(cloud([[10, 0, 0], [0, 10, -1]]))
    paths = write_pgm(str(tmp_path / "f"), img)
    assert len(paths) == 3
    head = open(paths[0], "rb").read(20)
    assert head.startswith(b"P5\n870 64\n")
