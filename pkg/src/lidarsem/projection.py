"""Spherical projection of a 360 degree scan onto a range image.

Column 0 starts at azimuth -180 deg and columns advance counter-clockwise
(azimuth = atan2(y, x)); row 0 is the top elevation bin. A pixel keeps the
nearest point that falls into it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scan_io import PointCloud

RANGE, INTENSITY, HEIGHT = 0, 1, 2


@dataclass(frozen=True)
class ProjectionConfig:
    height: int = 64
    width: int = 870
    elev_min_deg: float = -24.8
    elev_max_deg: float = 2.0


@dataclass
class RangeImage:
    """``data`` is (H, W, 3): range, intensity, height; invalid pixels hold 0."""

    data: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.valid.shape

    def channel(self, c):
        return self.data[..., c]


@dataclass
class PixelIndexMap:
    """``pixel_point[r, c]`` is the winning point index or -1.

    ``point_pixel[k]`` is the flat pixel a point falls into (winner or not), or
    -1 for points outside the elevation span.
    """

    pixel_point: np.ndarray
    point_pixel: np.ndarray
    dropped: int = 0

    @property
    def shape(self):
        return self.pixel_point.shape

    def winners(self) -> np.ndarray:
        """Boolean per point: does it own its pixel?"""
        won = np.zeros(len(self.point_pixel), dtype=bool)
        pp = self.pixel_point.ravel()
        won[pp[pp >= 0]] = True
        return won


def pixel_coords(xyz, cfg: ProjectionConfig = ProjectionConfig()):
    """(row, col, range) of every point; row is -1 outside the elevation span."""
    xyz = np.asarray(xyz, dtype=float)
    rng = np.linalg.norm(xyz, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        elev = np.degrees(np.arcsin(np.clip(xyz[:, 2] / rng, -1, 1)))
    az = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
    col = np.floor((az + 180.0) / 360.0 * cfg.width).astype(np.int64) % cfg.width
    frac = (cfg.elev_max_deg - elev) / (cfg.elev_max_deg - cfg.elev_min_deg)
    row = np.floor(frac * cfg.height)
    # the bottom edge of the span belongs to the last row
    row = np.where(elev == cfg.elev_min_deg, cfg.height - 1, row)
    ok = (elev >= cfg.elev_min_deg) & (elev <= cfg.elev_max_deg) & (rng > 0)
    row = np.where(ok, row, -1).astype(np.int64)
    return row, col, rng


def project(cloud: PointCloud, cfg: ProjectionConfig = ProjectionConfig()):
    """Project a cloud; returns ``(RangeImage, PixelIndexMap)``."""
    H, W = cfg.height, cfg.width
    n = len(cloud)
    data = np.zeros((H, W, 3))
    valid = np.zeros((H, W), dtype=bool)
    pixel_point = np.full((H, W), -1, dtype=np.int64)
    point_pixel = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return RangeImage(data, valid), PixelIndexMap(pixel_point, point_pixel, 0)
    row, col, rng = pixel_coords(cloud.xyz, cfg)
    ok = row >= 0
    flat = row * W + col
    point_pixel[ok] = flat[ok]
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return RangeImage(data, valid), PixelIndexMap(pixel_point, point_pixel, n)
    # per pixel: nearest range wins, equal ranges go to the lower index
    order = idx[np.lexsort((idx, rng[idx], flat[idx]))]
    first = np.r_[True, flat[order][1:] != flat[order][:-1]]
    win = order[first]
    pp = pixel_point.ravel()
    pp[flat[win]] = win
    owner = pp[pp >= 0]
    pix = np.flatnonzero(pp >= 0)
    d = data.reshape(-1, 3)
    d[pix, RANGE] = rng[owner]
    d[pix, INTENSITY] = cloud.intensity[owner]
    d[pix, HEIGHT] = cloud.xyz[owner, 2]
    valid.ravel()[pix] = True
    return RangeImage(data, valid), PixelIndexMap(pixel_point, point_pixel, int((~ok).sum()))


def back_project(index_map: PixelIndexMap, pixel_values, fill=np.nan) -> np.ndarray:
    """Per-point values read from each point's pixel; ``fill`` for dropped points."""
    pixel_values = np.asarray(pixel_values)
    if pixel_values.shape[:2] != index_map.shape:
        raise ValueError(f"pixel grid {pixel_values.shape[:2]} does not match map {index_map.shape}")
    flat = pixel_values.reshape((-1,) + pixel_values.shape[2:])
    out = np.full((len(index_map.point_pixel),) + pixel_values.shape[2:], fill, dtype=float)
    ok = index_map.point_pixel >= 0
    out[ok] = flat[index_map.point_pixel[ok]]
    return out


def write_pgm(prefix, img: RangeImage) -> list[str]:
    """Dump range/intensity/height as 8-bit binary PGMs, row 0 at the top."""
    paths = []
    for name, c in (("range", RANGE), ("intensity", INTENSITY), ("height", HEIGHT)):
        ch = img.channel(c)
        v = ch[img.valid]
        lo, hi = (v.min(), v.max()) if v.size else (0.0, 1.0)
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        g = np.where(img.valid, np.clip((ch - lo) * scale, 0, 255), 0).astype(np.uint8)
        path = f"{prefix}_{name}.pgm"
        with open(path, "wb") as fh:
            fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode())
            fh.write(g.tobytes())
        paths.append(path)
    return paths
