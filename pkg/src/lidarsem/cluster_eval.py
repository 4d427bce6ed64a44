"""Pointwise and object-wise evaluation.

Points predicted movable are grouped into Euclidean clusters, each cluster is
wrapped in a yawed 3D box, and boxes are scored against ground truth with
greedy IoU matching. Pointwise metrics come from PR curves over per-point
confidences, reported at their maximum-F1 operating point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import shapely.geometry
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError, cKDTree


@dataclass
class Box3D:
    """Box with extents (length along yaw, width, height) about ``center``."""

    center: np.ndarray
    extents: np.ndarray
    yaw: float = 0.0
    score: float = 1.0
    difficulty: str = ""
    box_id: int = -1

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.extents = np.asarray(self.extents, dtype=float).reshape(3)
        if np.any(self.extents <= 0):
            raise ValueError(f"box extents must be positive, got {self.extents}")
        self.yaw = float(self.yaw)

    def footprint(self) -> shapely.geometry.Polygon:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        hl, hw = self.extents[:2] / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return shapely.geometry.Polygon(local @ rot.T + self.center[:2])

    def volume(self) -> float:
        return float(np.prod(self.extents))

    def contains(self, xyz, margin=0.0) -> np.ndarray:
        d = np.asarray(xyz, dtype=float) - self.center
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
        return np.all(np.abs(local) <= self.extents / 2 + margin, axis=1)


@dataclass
class Cluster:
    indices: np.ndarray
    score: float


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    best: int = field(init=False)

    def __post_init__(self):
        f1 = self.f1
        self.best = int(np.argmax(f1)) if len(f1) else 0

    @property
    def f1(self) -> np.ndarray:
        denom = self.precision + self.recall
        with np.errstate(invalid="ignore", divide="ignore"):
            f = np.where(denom > 0, 2 * self.precision * self.recall / denom, 0.0)
        return f

    @property
    def max_f1(self) -> float:
        return float(self.f1[self.best])

    @property
    def best_threshold(self) -> float:
        return float(self.thresholds[self.best])

    @property
    def best_precision(self) -> float:
        return float(self.precision[self.best])

    @property
    def best_recall(self) -> float:
        return float(self.recall[self.best])


def cluster_points(xyz, mask=None, radius=0.5, min_points=20, confidence=None) -> list[Cluster]:
    """Connected components of masked points under ``distance < radius``.

    Components with fewer than ``min_points`` members are discarded. Clusters
    are returned ordered by their smallest member index.
    """
    xyz = np.asarray(xyz, dtype=float)
    idx = np.arange(len(xyz)) if mask is None else np.flatnonzero(mask)
    if len(idx) == 0:
        return []
    pts = xyz[idx]
    pairs = cKDTree(pts).query_pairs(np.nextafter(radius, 0), output_type="ndarray")
    n = len(idx)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    clusters = []
    for c in np.unique(comp):
        members = idx[comp == c]
        if len(members) < min_points:
            continue
        score = float(np.mean(confidence[members])) if confidence is not None else 1.0
        clusters.append(Cluster(members, score))
    clusters.sort(key=lambda cl: cl.indices[0])
    return clusters


def _rect_area(xy, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    u = xy @ np.array([c, s])
    v = xy @ np.array([-s, c])
    return (u.max() - u.min()) * (v.max() - v.min())


def fit_box(cluster: Cluster, xyz) -> Box3D:
    """Yawed box around a cluster.

    The yaw candidate set is the principal axis of the xy covariance plus every
    convex-hull edge direction; the candidate with the smallest footprint area
    wins, ties going to the principal axis. For near-square footprints the
    covariance is isotropic and the hull edges carry the orientation.
    """
    pts = np.asarray(xyz, dtype=float)[cluster.indices]
    xy = pts[:, :2]
    cov = np.cov(xy.T) if len(xy) > 1 else np.eye(2)
    w, V = np.linalg.eigh(cov)
    major = V[:, np.argmax(w)]
    pca_yaw = np.arctan2(major[1], major[0])
    yaws = [pca_yaw]
    try:
        hull = ConvexHull(xy)
        hv = xy[hull.vertices]
        edges = np.roll(hv, -1, axis=0) - hv
        yaws.extend(np.arctan2(edges[:, 1], edges[:, 0]))
    except (QhullError, ValueError):
        pass
    areas = np.array([_rect_area(xy, y) for y in yaws])
    best = int(np.argmin(areas))
    if areas[0] <= areas[best] * (1 + 1e-9):
        best = 0
    yaw = float(yaws[best])
    # canonical range (-pi/2, pi/2]
    yaw = (yaw + np.pi / 2) % np.pi - np.pi / 2
    c, s = np.cos(yaw), np.sin(yaw)
    u = xy @ np.array([c, s])
    v = xy @ np.array([-s, c])
    z = pts[:, 2]
    mids = np.array([(u.max() + u.min()) / 2, (v.max() + v.min()) / 2])
    ext = np.array([u.max() - u.min(), v.max() - v.min(), z.max() - z.min()])
    ext = np.maximum(ext, 1e-3)
    center_xy = mids[0] * np.array([c, s]) + mids[1] * np.array([-s, c])
    center = np.array([center_xy[0], center_xy[1], (z.max() + z.min()) / 2])
    return Box3D(center, ext, yaw, score=cluster.score)


def iou3d(a: Box3D, b: Box3D) -> float:
    zlo = max(a.center[2] - a.extents[2] / 2, b.center[2] - b.extents[2] / 2)
    zhi = min(a.center[2] + a.extents[2] / 2, b.center[2] + b.extents[2] / 2)
    dz = zhi - zlo
    if dz <= 0:
        return 0.0
    inter = a.footprint().intersection(b.footprint()).area * dz
    union = a.volume() + b.volume() - inter
    return float(inter / union) if union > 0 else 0.0


def pr_curve(confidence, truth) -> PRCurve:
    """Precision/recall at every distinct confidence, thresholds descending.

    A point counts as predicted positive when its confidence is >= the
    threshold.
    """
    conf = np.asarray(confidence, dtype=float).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if conf.shape != truth.shape:
        raise ValueError("confidence and truth lengths differ")
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise ValueError("ground truth contains no positives")
    order = np.argsort(-conf, kind="stable")
    c = conf[order]
    tp = np.cumsum(truth[order])
    # last position of each distinct value in the descending sort
    last = np.flatnonzero(np.r_[c[1:] != c[:-1], True])
    tp_at = tp[last].astype(float)
    n_at = (last + 1).astype(float)
    return PRCurve(c[last], tp_at / n_at, tp_at / n_pos)


def _match_frame(preds, gts, iou_thresh, difficulty):
    """Greedy matching in descending score order; returns (scores, tp, n_gt)."""
    counted = [difficulty is None or g.difficulty == difficulty for g in gts]
    used = [False] * len(gts)
    scores, flags = [], []
    for p in sorted(preds, key=lambda b: -b.score):
        best, best_iou = -1, iou_thresh
        ignored = False
        for j, g in enumerate(gts):
            v = iou3d(p, g)
            if v < iou_thresh:
                continue
            if not counted[j]:
                ignored = True
                continue
            if not used[j] and v >= best_iou:
                if best < 0 or v > best_iou:
                    best, best_iou = j, v
        if best >= 0:
            used[best] = True
            scores.append(p.score)
            flags.append(True)
        elif ignored:
            continue
        else:
            scores.append(p.score)
            flags.append(False)
    return scores, flags, int(sum(counted))


def _as_frames(boxes):
    if len(boxes) and isinstance(boxes[0], Box3D):
        return [boxes]
    return list(boxes)


def average_precision(preds, gts, iou_thresh=0.5, difficulty=None, interpolation="11point"):
    """Detection AP over one frame (lists of boxes) or many (lists of lists).

    Ground-truth boxes whose tag differs from ``difficulty`` are treated as
    don't-care: predictions that only match them are dropped, not counted as
    false positives. Returns ``None`` when no ground truth survives the filter.
    """
    pf, gf = _as_frames(preds), _as_frames(gts)
    if len(pf) == 0:
        pf = [[] for _ in gf]
    if len(pf) != len(gf):
        raise ValueError("prediction and ground-truth frame counts differ")
    scores, flags, n_gt = [], [], 0
    for p, g in zip(pf, gf):
        s, f, n = _match_frame(p, g, iou_thresh, difficulty)
        scores += s
        flags += f
        n_gt += n
    if n_gt == 0:
        return None
    if not scores:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(flags)[order]
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_gt
    return interpolated_ap(prec, rec, interpolation)


def interpolated_ap(precision, recall, interpolation="11point") -> float:
    precision = np.asarray(precision, dtype=float)
    recall = np.asarray(recall, dtype=float)
    if interpolation == "11point":
        ap = 0.0
        for r in np.linspace(0, 1, 11):
            sel = precision[recall >= r - 1e-12]
            ap += sel.max() if len(sel) else 0.0
        return float(ap / 11)
    if interpolation == "continuous":
        mrec = np.r_[0.0, recall, 1.0]
        mpre = np.r_[0.0, precision, 0.0]
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        i = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))
    raise ValueError(f"unknown interpolation {interpolation!r}")


def object_recall(preds, gts, iou_thresh=0.5, difficulty=None):
    """Fraction of (difficulty-filtered) ground-truth boxes matched by a prediction."""
    pf, gf = _as_frames(preds), _as_frames(gts)
    hit = total = 0
    for p, g in zip(pf, gf):
        s, f, n = _match_frame(p, g, iou_thresh, difficulty)
        hit += int(sum(f))
        total += n
    return hit / total if total else None


def pointwise_recall(predicted, truth, cls, difficulty=None, point_difficulty=None):
    """TP / (TP + FN) for class ``cls``, optionally restricted to a difficulty tag."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    sel = truth == cls
    if difficulty is not None:
        sel &= np.asarray(point_difficulty) == difficulty
    n = int(sel.sum())
    if n == 0:
        return None
    return float(np.sum(predicted[sel] == cls) / n)


def write_pr_csv(path, curves: dict) -> None:
    """One row per (curve name, threshold) triple."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve", "threshold", "precision", "recall", "f1"])
        for name, c in curves.items():
            for t, p, r, f in zip(c.thresholds, c.precision, c.recall, c.f1):
                w.writerow([name, f"{t:.6f}", f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])


def plot_pr_curves(path, curves: dict, title="") -> None:
    """Static SVG with one line per curve and the max-F1 point marked."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "lidarsem"
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        ax.plot(c.recall, c.precision, label=f"{name} (F1={c.max_f1:.3f})")
        ax.plot([c.best_recall], [c.best_precision], "o", color=ax.lines[-1].get_color())
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
