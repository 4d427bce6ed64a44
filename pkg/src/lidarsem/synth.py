"""Ray-cast synthetic scenes with exact per-point ground truth.

A scene is a ground plane plus boxes of three kinds:

``static``  non-movable structure (buildings, walls, poles)
``parked``  movable object that never moves
``moving``  movable object with a per-frame world velocity (dynamic)

The sensor follows a constant-velocity, constant-yaw-rate trajectory and
fires ``n_rings x n_azimuth`` rays whose angles sit on projection bin
centers, so a scan at the default geometry projects without collisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigError
from .cluster_eval import Box3D
from .geometry import Pose
from .scan_io import DYNAMIC, MOVABLE, NON_MOVABLE, GroundTruth, PointCloud

KINDS = {"static": NON_MOVABLE, "parked": MOVABLE, "moving": DYNAMIC}


@dataclass
class SceneBox:
    kind: str
    center: tuple
    extents: tuple
    yaw: float = 0.0
    velocity: tuple = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0
    intensity: float = 0.5
    difficulty: str = "easy"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown box kind {self.kind!r}")
        if len(self.center) != 3 or len(self.extents) != 3:
            raise ConfigError("box center and extents need 3 values")
        if min(self.extents) <= 0:
            raise ConfigError("box extents must be positive")

    def at(self, t: int) -> tuple[np.ndarray, float]:
        if self.kind != "moving":
            return np.asarray(self.center, float), float(self.yaw)
        c = np.asarray(self.center, float) + t * np.asarray(self.velocity, float)
        return c, float(self.yaw + t * self.yaw_rate)


@dataclass
class RayPattern:
    n_rings: int = 64
    n_azimuth: int = 870
    elev_min_deg: float = -24.8
    elev_max_deg: float = 2.0
    max_range: float = 80.0

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, ring-major (top ring first)."""
        if self.n_rings <= 0 or self.n_azimuth <= 0:
            raise ConfigError("ray pattern has zero rays")
        d_el = (self.elev_max_deg - self.elev_min_deg) / self.n_rings
        elev = np.radians(self.elev_max_deg - (np.arange(self.n_rings) + 0.5) * d_el)
        d_az = 360.0 / self.n_azimuth
        az = np.radians(-180.0 + (np.arange(self.n_azimuth) + 0.5) * d_az)
        E, A = np.meshgrid(elev, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass
class Trajectory:
    start: tuple = (0.0, 0.0, 1.73)
    yaw: float = 0.0
    velocity: tuple = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0

    def pose(self, t: int) -> Pose:
        """Sensor-to-world pose at frame ``t``."""
        p = np.asarray(self.start, float) + t * np.asarray(self.velocity, float)
        return Pose.from_rotvec([0.0, 0.0, self.yaw + t * self.yaw_rate], p)


@dataclass
class SceneConfig:
    boxes: list = field(default_factory=list)
    ground: bool = True
    ground_z: float = 0.0
    ground_intensity: float = 0.15
    rays: RayPattern = field(default_factory=RayPattern)
    trajectory: Trajectory = field(default_factory=Trajectory)
    intensity_noise: float = 0.0
    range_noise: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        d = dict(d or {})
        try:
            boxes = [SceneBox(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in b.items()})
                     for b in d.pop("boxes", [])]
            rays = RayPattern(**d.pop("rays", {}))
            traj = d.pop("trajectory", {})
            traj = Trajectory(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in traj.items()})
            return cls(boxes=boxes, rays=rays, trajectory=traj, **d)
        except TypeError as exc:
            raise ConfigError(f"bad scene config: {exc}") from None

    def validate(self):
        if not self.ground and not self.boxes:
            raise ConfigError("scene is empty: no ground and no boxes")
        self.rays.directions()


def load_scene_config(path) -> SceneConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if isinstance(data, dict) and "scene" in data:
        data = data["scene"]
    return SceneConfig.from_dict(data)


def _ray_box(origin, dirs, center, extents, yaw):
    """Entry distance of each ray into a yawed box (inf on miss), slab method."""
    c, s = np.cos(yaw), np.sin(yaw)
    Rt = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = Rt @ (origin - center)
    d = dirs @ Rt.T
    half = np.asarray(extents, float) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: hit only if origin lies within it
    par = d == 0
    inside = np.abs(o) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    tn = lo.max(axis=1)
    tf = hi.min(axis=1)
    hit = (tn <= tf) & (tn > 1e-9)
    return np.where(hit, tn, np.inf)


def cast(cfg: SceneConfig, t: int):
    """Ray-cast frame ``t``; returns (sensor-frame points, hit surface id per point, ray ids).

    Surface id -1 is the ground, otherwise the index into ``cfg.boxes``.
    """
    pose = cfg.trajectory.pose(t)
    dirs_s = cfg.rays.directions()
    dirs_w = dirs_s @ pose.rotation.T
    origin = pose.translation
    n = len(dirs_s)
    best = np.full(n, np.inf)
    surf = np.full(n, -2, dtype=np.int64)
    if cfg.ground:
        dz = dirs_w[:, 2]
        with np.errstate(divide="ignore"):
            tg = np.where(dz < 0, (cfg.ground_z - origin[2]) / dz, np.inf)
        tg = np.where(tg > 0, tg, np.inf)
        upd = tg < best
        best[upd], surf[upd] = tg[upd], -1
    for i, box in enumerate(cfg.boxes):
        c, yaw = box.at(t)
        tb = _ray_box(origin, dirs_w, c, box.extents, yaw)
        # strict inequality: on exact ties the earlier surface keeps the ray
        upd = tb < best
        best[upd], surf[upd] = tb[upd], i
    keep = np.isfinite(best) & (best <= cfg.rays.max_range)
    rays = np.flatnonzero(keep)
    return dirs_s[rays] * best[rays, None], surf[rays], rays


def synth_scene(cfg: SceneConfig, t: int) -> tuple[PointCloud, GroundTruth, Pose]:
    cfg.validate()
    xyz, surf, rays = cast(cfg, t)
    rng = np.random.default_rng([cfg.seed, t])
    if cfg.range_noise > 0:
        r = np.linalg.norm(xyz, axis=1)
        xyz = xyz * ((r + rng.normal(0, cfg.range_noise, len(r))) / r)[:, None]
    refl = np.array([b.intensity for b in cfg.boxes] + [cfg.ground_intensity])
    inten = refl[surf]
    if cfg.intensity_noise > 0:
        inten = inten + rng.normal(0, cfg.intensity_noise, len(inten))
    labels = np.full(len(xyz), NON_MOVABLE, dtype=np.int64)
    box_ids = np.full(len(xyz), -1, dtype=np.int64)
    pose = cfg.trajectory.pose(t)
    inv = pose.inverse()
    gt_boxes = []
    for i, box in enumerate(cfg.boxes):
        on = surf == i
        labels[on] = KINDS[box.kind]
        if box.kind == "static":
            continue
        box_ids[on] = i
        c, yaw = box.at(t)
        rel_yaw = yaw - (cfg.trajectory.yaw + t * cfg.trajectory.yaw_rate)
        gt_boxes.append(Box3D(inv.apply(c), box.extents, rel_yaw, difficulty=box.difficulty, box_id=i))
    cloud = PointCloud(xyz, inten, frame_id=t, timestamp=0.1 * t)
    cloud.ray_index = rays
    return cloud, GroundTruth(labels, box_ids, gt_boxes), pose


def odometry(pose_prev: Pose, pose_next: Pose) -> Pose:
    """Transform taking static points from the previous sensor frame to the next."""
    return pose_next.inverse() @ pose_prev


def benchmark_scene(seed=0, n_azimuth=870) -> SceneConfig:
    """Street scene: ground, two walls, a pole, two parked and two moving cars."""
    car = dict(extents=(4.2, 1.8, 1.5), intensity=0.7)
    boxes = [
        SceneBox("static", (0.0, 11.0, 3.0), (60.0, 1.0, 6.0), intensity=0.35),
        SceneBox("static", (0.0, -11.0, 3.0), (60.0, 1.0, 6.0), intensity=0.35),
        SceneBox("static", (4.0, 8.5, 2.0), (0.4, 0.4, 4.0), intensity=0.4),
        SceneBox("parked", (8.0, 7.0, 0.95), yaw=0.0, difficulty="easy", **car),
        SceneBox("parked", (-9.0, -7.5, 0.95), yaw=0.05, difficulty="moderate", **car),
        SceneBox("moving", (-12.0, 3.5, 0.95), velocity=(1.0, 0.0, 0.0), difficulty="easy", **car),
        SceneBox("moving", (14.0, -3.0, 0.95), yaw=np.pi, velocity=(-0.8, 0.0, 0.0),
                 difficulty="hard", **car),
    ]
    return SceneConfig(
        boxes=boxes,
        rays=RayPattern(n_azimuth=n_azimuth, max_range=30.0),
        trajectory=Trajectory(start=(0.0, 0.0, 1.73), velocity=(0.3, 0.0, 0.0)),
        intensity_noise=0.05,
        seed=seed,
    )
