"""Scan, pose and label file formats.

Velodyne ``.bin``: little-endian float32 quadruples (x, y, z, intensity), no
header. Pose files: one row-major 3x4 ``[R|t]`` per line (KITTI odometry).
Label CSV: ``index,label,p_nonmov,p_mov,p_dyn``.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .cluster_eval import Box3D
from .geometry import Pose, orthonormalize

log = logging.getLogger(__name__)

NON_MOVABLE, MOVABLE, DYNAMIC = 0, 1, 2
CLASS_NAMES = ("non-movable", "movable", "dynamic")
DIFFICULTIES = ("easy", "moderate", "hard")

_VELO_DTYPE = np.dtype("<f4")


@dataclass
class PointCloud:
    """Ordered scan; row k of ``xyz`` is point k for the whole pipeline."""

    xyz: np.ndarray
    intensity: np.ndarray
    frame_id: int = 0
    timestamp: float = 0.0
    rejected: int = 0

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        self.intensity = np.clip(np.asarray(self.intensity, dtype=float).reshape(-1), 0.0, 1.0)
        if len(self.intensity) != len(self.xyz):
            raise ValueError("intensity and xyz lengths differ")

    def __len__(self):
        return len(self.xyz)


@dataclass
class GroundTruth:
    """Per-point class labels and box membership (-1 = no box)."""

    labels: np.ndarray
    box_ids: np.ndarray
    boxes: list[Box3D] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.box_ids = np.asarray(self.box_ids, dtype=np.int64)
        if self.labels.shape != self.box_ids.shape:
            raise ValueError("labels and box_ids lengths differ")

    def difficulty_of_points(self) -> np.ndarray:
        """Difficulty tag of each point's box, '' where the point has none."""
        tags = {b.box_id: b.difficulty for b in self.boxes}
        return np.array([tags.get(int(i), "") for i in self.box_ids], dtype=object)


def read_velodyne_bin(path, frame_id=0, timestamp=0.0) -> PointCloud:
    size = os.path.getsize(path)
    if size % 16:
        raise FormatError(f"{path}: size {size} is not a multiple of 16 bytes")
    raw = np.fromfile(path, dtype=_VELO_DTYPE).reshape(-1, 4).astype(float)
    finite = np.all(np.isfinite(raw), axis=1)
    rejected = int((~finite).sum())
    if rejected:
        log.warning("%s: rejected %d non-finite points", path, rejected)
    raw = raw[finite]
    return PointCloud(raw[:, :3], raw[:, 3], frame_id, timestamp, rejected)


def write_velodyne_bin(path, cloud: PointCloud) -> None:
    out = np.empty((len(cloud), 4), dtype=_VELO_DTYPE)
    out[:, :3] = cloud.xyz
    out[:, 3] = cloud.intensity
    out.tofile(path)


def read_poses(path) -> list[Pose]:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(tokens)}")
            try:
                M = np.array([float(x) for x in tokens]).reshape(3, 4)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            R = M[:, :3]
            if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
                R = orthonormalize(R)
            poses.append(Pose(R, M[:, 3]))
    return poses


def write_poses(path, poses) -> None:
    with open(path, "w") as fh:
        for p in poses:
            M = np.hstack([p.rotation, p.translation[:, None]])
            fh.write(" ".join(f"{v:.17g}" for v in M.ravel()) + "\n")


def write_labels(path, labels, beliefs) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    beliefs = np.asarray(beliefs, dtype=float).reshape(-1, 3)
    if len(labels) != len(beliefs):
        raise ValueError(f"{len(labels)} labels but {len(beliefs)} beliefs")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "p_nonmov", "p_mov", "p_dyn"])
        for k, (lab, b) in enumerate(zip(labels, beliefs)):
            w.writerow([k, CLASS_NAMES[lab], f"{b[0]:.6f}", f"{b[1]:.6f}", f"{b[2]:.6f}"])


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    labels, beliefs = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            labels.append(CLASS_NAMES.index(row["label"]))
            beliefs.append([float(row["p_nonmov"]), float(row["p_mov"]), float(row["p_dyn"])])
    return np.array(labels, dtype=np.int64), np.array(beliefs, dtype=float).reshape(-1, 3)


def write_ground_truth(points_path, boxes_path, gt: GroundTruth) -> None:
    """Flattened ground truth: a per-point CSV and a per-box CSV."""
    with open(points_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "box_id"])
        for k, (lab, bid) in enumerate(zip(gt.labels, gt.box_ids)):
            w.writerow([k, CLASS_NAMES[lab], int(bid)])
    with open(boxes_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["box_id", "cx", "cy", "cz", "length", "width", "height", "yaw", "difficulty"])
        for b in gt.boxes:
            w.writerow([b.box_id, *(f"{v:.9g}" for v in (*b.center, *b.extents, b.yaw)), b.difficulty])


def read_ground_truth(points_path, boxes_path=None) -> GroundTruth:
    labels, box_ids = [], []
    with open(points_path, newline="") as fh:
        for row in csv.DictReader(fh):
            labels.append(CLASS_NAMES.index(row["label"]))
            box_ids.append(int(row["box_id"]))
    boxes = []
    if boxes_path is not None and os.path.exists(boxes_path):
        with open(boxes_path, newline="") as fh:
            for row in csv.DictReader(fh):
                boxes.append(Box3D(
                    center=[float(row[k]) for k in ("cx", "cy", "cz")],
                    extents=[float(row[k]) for k in ("length", "width", "height")],
                    yaw=float(row["yaw"]),
                    difficulty=row["difficulty"],
                    box_id=int(row["box_id"]),
                ))
    return GroundTruth(labels, box_ids, boxes)
