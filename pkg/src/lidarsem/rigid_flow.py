"""Dense rigid motion field between two scans.

Every point k of the first scan carries its own rigid transform tau_k. The
field minimizes

    E = sum_{i in keypoints} l_d rho_d(|tau_i(p_i) - q_i|^2)
      + sum_{<i,j> in edges} l_p rho(|W log(tau_i^-1 tau_j)|^2)
      + sum_k |A log(tau0_k^-1 tau_k)|^2

where q_i is the correspondence target of keypoint i in the second scan, W
weights the rotation part of the se(3) log by ``rot_weight``, rho and rho_d
are Cauchy kernels (plain quadratics when ``reg_scale`` / ``data_scale`` are
None; the data kernel discounts the odd wrong target) and the last term
is a weak pull toward the initial field tau0. Without it a rigid piece whose
keypoints happen to be collinear could spin freely about their line.

Targets are found in stages and held fixed while a damped Gauss-Newton
descent runs, so the energy never rises inside a stage:

1. coarse: each keypoint's local patch is slid over the scan-2 points around
   its predicted position and the best-fitting one is taken,
2. refine: the patch is aligned to scan 2 by point-to-plane least squares,
   which removes the sampling offset between the two scans (repeated
   ``refine_rounds`` times).

With patch matching disabled (``search_radius <= 0``) a single stage refreshes
nearest-neighbour targets before every step instead, as in ICP; a nearest
neighbour is never farther than the previous target, so that stage is
monotone as well.

Each step solves for all transforms at once: the keypoint blocks together
with the regularizer's harmonic extension onto the remaining points.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .errors import DataError
from .geometry import Pose, is_rigid, orthonormalize, relative, se3_exp, se3_log, skew

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowConfig:
    k: int = 6
    # spanning-tree edges of a denser kNN graph, up to link_radius long, join
    # the pieces a thin kNN graph leaves apart on ring-sampled surfaces
    link_k: int = 16
    link_radius: float = 2.0
    curvature_k: int = 30
    keypoint_quantile: float = 0.1
    flat_threshold: float = 1e-3
    min_keypoints: int = 10
    lambda_d: float = 1.0
    lambda_p: float = 5.0
    rot_weight: float = 1.0
    # pull toward the initial field, translation and rotation parts
    lambda_a: float = 1e-2
    lambda_a_rot: float = 1.0
    # Cauchy scale of the regularizer in the weighted se(3) metric; None = Gaussian
    reg_scale: float | None = 0.1
    # Cauchy scale of the keypoint residual in metres; None = Gaussian
    data_scale: float | None = 0.2
    tol: float = 1e-4
    max_iters: int = 30
    max_damping_steps: int = 10
    initial_damping: float = 1e-4
    # patch matching; search_radius <= 0 falls back to nearest neighbours
    search_radius: float = 1.5
    patch_size: int = 20
    patch_stride: int = 6
    patch_trunc: float = 0.3
    # candidates are thinned to one scan-2 point per voxel of this size
    candidate_voxel: float = 0.15
    displacement_weight: float = 0.01
    normal_k: int = 20
    refine_rounds: int = 2
    refine_iters: int = 8
    # points within this distance of the dominant ground plane take the init
    # transform and stay out of the graph; None keeps every point
    ground_threshold: float | None = 0.1
    # the graph is built on one scan-1 point per voxel of this size and every
    # other point copies the transform of its nearest representative; 0 = all
    solve_voxel: float = 0.15
    # segment initialization: Euclidean segments of scan 1 try xy shifts of the
    # init within search_radius; 0 disables it
    segment_radius: float = 1.0
    segment_min_points: int = 20
    segment_samples: int = 150
    segment_voxel: float = 0.25
    segment_step: float = 0.3
    segment_gain: float = 0.6
    segment_margin: float = 0.005


@dataclass
class MotionField:
    """Per-point rotations ``R`` (N, 3, 3) and translations ``t`` (N, 3).

    After :func:`minimize`, ``energies`` lists the energy before and after
    every accepted step and ``stages`` the position in that list where each
    target stage starts.
    """

    R: np.ndarray
    t: np.ndarray
    valid: np.ndarray = None
    energies: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    iterations: int = 0
    warning: str | None = None

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.valid is None:
            self.valid = np.ones(len(self.t), dtype=bool)

    @classmethod
    def identity(cls, n) -> MotionField:
        return cls(np.tile(np.eye(3), (n, 1, 1)), np.zeros((n, 3)))

    @classmethod
    def constant(cls, n, pose: Pose) -> MotionField:
        return cls(np.tile(pose.rotation, (n, 1, 1)), np.tile(pose.translation, (n, 1)))

    def __len__(self):
        return len(self.t)

    def apply(self, xyz) -> np.ndarray:
        return np.einsum("nij,nj->ni", self.R, xyz) + self.t

    def pose(self, k) -> Pose:
        return Pose(self.R[k], self.t[k])

    def twists(self) -> np.ndarray:
        return se3_log(self.R, self.t)

    def rotvecs(self) -> np.ndarray:
        return self.twists()[:, 3:]

    def is_rigid(self, tol=1e-9) -> bool:
        return is_rigid(self.R, tol)

    def copy(self) -> MotionField:
        return MotionField(self.R.copy(), self.t.copy(), self.valid.copy())

    def stage_energies(self) -> list[list[float]]:
        """``energies`` split at the stage boundaries."""
        cuts = list(self.stages) + [len(self.energies)]
        return [self.energies[a:b] for a, b in zip(cuts[:-1], cuts[1:])]


@dataclass
class Keypoints:
    indices: np.ndarray
    scores: np.ndarray
    fallback: bool = False


@dataclass
class FlowGraph:
    """Keypoints with their sources/targets and the undirected neighbour edges."""

    keypoints: np.ndarray
    edges: np.ndarray
    sources: np.ndarray
    targets: np.ndarray
    target_index: np.ndarray
    lambda_d: float = 1.0
    lambda_p: float = 5.0
    rot_weight: float = 1.0
    reg_scale: float | None = None
    data_scale: float | None = None
    n_points: int = 0
    tree2: cKDTree = None
    lambda_a: float = 0.0
    lambda_a_rot: float = 0.0
    anchor_R: np.ndarray | None = None
    anchor_t: np.ndarray | None = None
    # patch matching state (None when disabled)
    patches: np.ndarray | None = None
    normals2: np.ndarray | None = None
    normal_ok: np.ndarray | None = None
    cand_index: np.ndarray | None = None
    cand_tree: cKDTree | None = None

    def refresh(self, field_: MotionField) -> None:
        """Re-pick each keypoint target as the nearest scan-2 point of tau_i(p_i)."""
        moved = np.einsum("nij,nj->ni", field_.R[self.keypoints], self.sources) + field_.t[self.keypoints]
        _, idx = self.tree2.query(moved)
        self.target_index = idx
        self.targets = self.tree2.data[idx]


def _knn(xyz, k):
    n = len(xyz)
    kk = min(k + 1, n)
    _, idx = cKDTree(xyz).query(xyz, k=kk)
    idx = idx.reshape(n, kk)
    # the query point itself normally sits in column 0; drop it wherever it is
    self_mask = idx == np.arange(n)[:, None]
    has_self = self_mask.any(axis=1)
    keep = ~self_mask
    keep[~has_self, kk - 1] = False
    return idx[keep].reshape(n, kk - 1)


def _link_edges(xyz, cfg):
    if cfg.link_k <= cfg.k or cfg.link_radius <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    n = len(xyz)
    nb = _knn(xyz, cfg.link_k)
    i = np.repeat(np.arange(n), nb.shape[1])
    j = nb.ravel()
    d = np.linalg.norm(xyz[i] - xyz[j], axis=1)
    ok = (d <= cfg.link_radius) & (i != j)
    # zero-length edges vanish in a sparse matrix; nudge them
    A = sp.coo_matrix((np.maximum(d[ok], 1e-12), (i[ok], j[ok])), shape=(n, n))
    T = minimum_spanning_tree(A).tocoo()
    return np.stack([np.minimum(T.row, T.col), np.maximum(T.row, T.col)], axis=1).astype(np.int64)


def _local_eigen(xyz, k):
    """Ascending covariance eigenvalues and eigenvectors of each k-neighbourhood."""
    n = len(xyz)
    kk = min(k, n)
    _, idx = cKDTree(xyz).query(xyz, k=kk)
    nb = xyz[idx.reshape(n, kk)]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / kk
    return np.linalg.eigh(cov)


def curvature(xyz, k=30) -> np.ndarray:
    """Surface variation lambda_min / sum(lambda) of each k-neighbourhood."""
    xyz = np.asarray(xyz, dtype=float)
    w, _ = _local_eigen(xyz, k)
    tot = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, np.maximum(w[:, 0], 0) / tot, 0.0)


def surface_normals(xyz, k=20):
    """Unit normals and a mask of points whose neighbourhood is a clear plane.

    A ring-sampled surface often yields near-collinear neighbourhoods whose
    normal is arbitrary; those (and corners) are masked out.
    """
    xyz = np.asarray(xyz, dtype=float)
    w, V = _local_eigen(xyz, k)
    ok = (w[:, 1] > 0.05 * w[:, 2]) & (w[:, 0] < 0.01 * w[:, 1])
    return V[:, :, 0], ok


def voxel_representatives(xyz, size) -> np.ndarray:
    """Lowest point index in every occupied voxel (all indices when size <= 0)."""
    if size <= 0:
        return np.arange(len(xyz))
    keys = np.floor(np.asarray(xyz) / size).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def select_keypoints(xyz, cfg: FlowConfig = FlowConfig()) -> Keypoints:
    """Top-quantile curvature points; uniform subsample when nothing stands out."""
    xyz = np.asarray(getattr(xyz, "xyz", xyz), dtype=float)
    n = len(xyz)
    if n == 0:
        raise DataError("cannot select keypoints in an empty cloud")
    if cfg.min_keypoints > n:
        raise DataError(f"min_keypoints={cfg.min_keypoints} exceeds point count {n}")
    score = curvature(xyz, cfg.curvature_k)
    want = max(int(np.ceil(cfg.keypoint_quantile * n)), cfg.min_keypoints)
    distinctive = np.flatnonzero(score > cfg.flat_threshold)
    if len(distinctive) < cfg.min_keypoints:
        idx = np.unique(np.linspace(0, n - 1, want).round().astype(np.int64))
        log.info("no distinctive geometry; uniform keypoint fallback")
        return Keypoints(idx, score[idx], fallback=True)
    order = distinctive[np.argsort(-score[distinctive], kind="stable")]
    idx = np.sort(order[:want])
    return Keypoints(idx, score[idx], fallback=False)


def build_graph(xyz1, keypoints, xyz2, cfg: FlowConfig = FlowConfig(), init: MotionField | None = None) -> FlowGraph:
    """Symmetrized kNN edges over scan 1 plus keypoint correspondences into scan 2."""
    xyz1 = np.asarray(getattr(xyz1, "xyz", xyz1), dtype=float)
    xyz2 = np.asarray(getattr(xyz2, "xyz", xyz2), dtype=float)
    kp = np.asarray(getattr(keypoints, "indices", keypoints), dtype=np.int64)
    if len(xyz2) == 0:
        raise DataError("second scan is empty")
    if len(kp) and (kp.min() < 0 or kp.max() >= len(xyz1)):
        raise DataError("keypoint index out of range")
    n = len(xyz1)
    if n > 1:
        nb = _knn(xyz1, cfg.k)
        i = np.repeat(np.arange(n), nb.shape[1])
        j = nb.ravel()
        e = np.stack([np.minimum(i, j), np.maximum(i, j)], axis=1)
        edges = np.unique(np.vstack([e, _link_edges(xyz1, cfg)]), axis=0)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    start = init if init is not None else MotionField.identity(n)
    g = FlowGraph(
        keypoints=kp,
        edges=edges,
        sources=xyz1[kp],
        targets=np.zeros((len(kp), 3)),
        target_index=np.zeros(len(kp), dtype=np.int64),
        lambda_d=cfg.lambda_d,
        lambda_p=cfg.lambda_p,
        rot_weight=cfg.rot_weight,
        reg_scale=cfg.reg_scale,
        data_scale=cfg.data_scale,
        n_points=n,
        tree2=cKDTree(xyz2),
        lambda_a=cfg.lambda_a,
        lambda_a_rot=cfg.lambda_a_rot,
        anchor_R=start.R.copy(),
        anchor_t=start.t.copy(),
    )
    if cfg.search_radius > 0 and len(kp) and n > 1:
        # strided neighbours: a plain kNN patch is one scan column on ring data
        m = min(cfg.patch_size * max(cfg.patch_stride, 1), n)
        _, nb = cKDTree(xyz1).query(xyz1[kp], k=m)
        nb = nb.reshape(len(kp), m)[:, :: max(cfg.patch_stride, 1)]
        g.patches = xyz1[nb] - xyz1[kp][:, None, :]
        g.normals2, g.normal_ok = surface_normals(xyz2, cfg.normal_k)
        g.cand_index = voxel_representatives(xyz2, cfg.candidate_voxel)
        g.cand_tree = cKDTree(xyz2[g.cand_index])
    g.refresh(start)
    return g


def _weights(graph):
    w = np.ones(6)
    w[3:] = graph.rot_weight
    return w


def _anchor_weights(graph):
    return np.r_[np.full(3, graph.lambda_a), np.full(3, graph.lambda_a_rot)]


def _has_anchor(graph):
    return graph.anchor_R is not None and (graph.lambda_a > 0 or graph.lambda_a_rot > 0)


def _anchor_residuals(field_: MotionField, graph: FlowGraph):
    Rd, td = relative(graph.anchor_R, graph.anchor_t, field_.R, field_.t)
    return se3_log(Rd, td)


def _edge_residuals(field_: MotionField, graph: FlowGraph):
    """Unweighted se(3) logs of tau_i^-1 tau_j and their weighted squared norms."""
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    Rd, td = relative(field_.R[i], field_.t[i], field_.R[j], field_.t[j])
    lg = se3_log(Rd, td)
    s = np.sum((lg * _weights(graph)) ** 2, axis=1)
    return lg, s


def _rho(s, scale):
    if scale is None:
        return s
    c2 = scale * scale
    return c2 * np.log1p(s / c2)


def _rho_weight(s, scale):
    if scale is None:
        return np.ones_like(s)
    return 1.0 / (1.0 + s / (scale * scale))


def energy_terms(field_: MotionField, graph: FlowGraph) -> tuple[float, float]:
    """(data, regularizer) parts of the energy; the anchor counts as regularizer."""
    if not field_.is_rigid(1e-6):
        raise DataError("motion field contains an improper transform")
    kp = graph.keypoints
    r = np.einsum("nij,nj->ni", field_.R[kp], graph.sources) + field_.t[kp] - graph.targets
    data = graph.lambda_d * float(np.sum(_rho(np.sum(r * r, axis=1), graph.data_scale)))
    reg = 0.0
    if _has_anchor(graph):
        reg += float(np.sum(_anchor_weights(graph) * _anchor_residuals(field_, graph) ** 2))
    if len(graph.edges):
        _, s = _edge_residuals(field_, graph)
        reg += graph.lambda_p * float(np.sum(_rho(s, graph.reg_scale)))
    return data, reg


def energy(field_: MotionField, graph: FlowGraph) -> float:
    d, r = energy_terms(field_, graph)
    return d + r


def _normal_equations(field_: MotionField, graph: FlowGraph):
    """Gauss-Newton system for right-multiplied increments tau <- tau exp(eps).

    Edge terms are linearized as W(log D + eps_j - eps_i), dropping the adjoint
    of D = tau_i^-1 tau_j, and reweighted by the robust kernel (IRLS); the
    anchor is linearized the same way.
    """
    n = graph.n_points
    w2 = _weights(graph) ** 2
    rows, cols, vals = [], [], []
    g = np.zeros((n, 6))
    diag = np.zeros((n, 6))

    i, j = graph.edges[:, 0], graph.edges[:, 1]
    if len(i):
        lg, s = _edge_residuals(field_, graph)
        we = graph.lambda_p * _rho_weight(s, graph.reg_scale)
        contrib = we[:, None] * w2 * lg
        np.add.at(g, j, contrib)
        np.add.at(g, i, -contrib)
        deg = np.bincount(np.r_[i, j], weights=np.r_[we, we], minlength=n)
        diag += deg[:, None] * w2
        for d in range(6):
            v = -we * w2[d]
            rows += [6 * i + d, 6 * j + d]
            cols += [6 * j + d, 6 * i + d]
            vals += [v, v]

    if _has_anchor(graph):
        wa = _anchor_weights(graph)
        g += wa * _anchor_residuals(field_, graph)
        diag += wa

    kp = graph.keypoints
    if len(kp):
        R = field_.R[kp]
        p = graph.sources
        r = np.einsum("nij,nj->ni", R, p) + field_.t[kp] - graph.targets
        J = np.concatenate([R, -R @ skew(p)], axis=2)  # (K, 3, 6)
        ld = graph.lambda_d * _rho_weight(np.sum(r * r, axis=1), graph.data_scale)[:, None, None]
        H = ld * np.einsum("kai,kaj->kij", J, J)
        np.add.at(g, kp, ld[:, :, 0] * np.einsum("kai,ka->ki", J, r))
        a, b = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
        rows.append((6 * kp[:, None, None] + a).ravel())
        cols.append((6 * kp[:, None, None] + b).ravel())
        vals.append(H.ravel())

    if rows:
        off = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(6 * n, 6 * n)
        )
    else:
        off = sp.csr_matrix((6 * n, 6 * n))
    return off, diag.ravel(), g.ravel()


def _step(field_: MotionField, eps) -> MotionField:
    dR, dt = se3_exp(eps.reshape(-1, 6))
    R = field_.R @ dR
    t = np.einsum("nij,nj->ni", field_.R, dt) + field_.t
    return MotionField(orthonormalize(R), t, field_.valid.copy())


def coarse_targets(graph: FlowGraph, field_: MotionField, cfg: FlowConfig = FlowConfig()) -> None:
    """Patch-matching correspondences for large displacements.

    Each keypoint's scan-1 patch, rotated by its current transform, is slid
    onto the scan-2 voxel representatives within ``search_radius`` of the keypoint's
    predicted position (plus the plain nearest neighbour). The candidate
    minimizing the truncated mean squared patch misfit plus
    ``displacement_weight`` times the squared jump wins.
    """
    kp = graph.keypoints
    if len(kp) == 0 or graph.patches is None:
        return
    R = field_.R[kp]
    pred = np.einsum("nij,nj->ni", R, graph.sources) + field_.t[kp]
    offsets = np.einsum("nij,nmj->nmi", R, graph.patches)
    _, nn = graph.tree2.query(pred)
    cand_lists = graph.cand_tree.query_ball_point(pred, cfg.search_radius)
    owner, cidx = [], []
    for a, (lst, extra) in enumerate(zip(cand_lists, nn)):
        c = np.unique(np.r_[graph.cand_index[np.asarray(lst, dtype=np.int64)], extra])
        owner.append(np.full(len(c), a))
        cidx.append(c)
    owner = np.concatenate(owner)
    cidx = np.concatenate(cidx)
    q = graph.tree2.data[cidx]
    probes = q[:, None, :] + offsets[owner]
    d, _ = graph.tree2.query(probes.reshape(-1, 3), distance_upper_bound=cfg.patch_trunc)
    d = np.minimum(d, cfg.patch_trunc).reshape(len(cidx), -1)
    score = np.mean(d * d, axis=1) + cfg.displacement_weight * np.sum((q - pred[owner]) ** 2, axis=1)
    # best candidate per keypoint; ties go to the lower scan-2 index
    order = np.lexsort((cidx, score, owner))
    first = np.r_[True, owner[order][1:] != owner[order][:-1]]
    best = order[first]
    graph.target_index = cidx[best]
    graph.targets = graph.tree2.data[graph.target_index]


def refine_targets(graph: FlowGraph, field_: MotionField, cfg: FlowConfig = FlowConfig()) -> None:
    """Shift each target so the keypoint's patch lies on the scan-2 surface.

    A few point-to-plane least-squares translation updates per patch, using
    only patch points whose nearest scan-2 neighbour has a reliable normal and
    lies within ``patch_trunc``. A small ridge keeps directions the patch
    cannot observe (sliding along a single plane) where they are. A refined
    target is kept only if it lowers the truncated patch misfit.
    """
    kp = graph.keypoints
    if len(kp) == 0 or graph.patches is None:
        return
    offsets = np.einsum("nij,nmj->nmi", field_.R[kp], graph.patches)

    def misfit(centers):
        d, _ = graph.tree2.query((centers[:, None, :] + offsets).reshape(-1, 3))
        return np.mean(np.minimum(d, cfg.patch_trunc).reshape(len(kp), -1) ** 2, axis=1)

    q0 = graph.targets
    q = q0.copy()
    for _ in range(cfg.refine_iters):
        probes = q[:, None, :] + offsets
        d, j = graph.tree2.query(probes.reshape(-1, 3))
        d = d.reshape(probes.shape[:2])
        j = j.reshape(probes.shape[:2])
        nrm = graph.normals2[j]
        r = np.einsum("kmi,kmi->km", nrm, probes - graph.tree2.data[j])
        use = ((d < cfg.patch_trunc) & graph.normal_ok[j])[..., None]
        A = np.einsum("kmi,kmj->kij", nrm * use, nrm) + 1e-3 * np.eye(3)
        b = -np.einsum("kmi,km->ki", nrm * use, r)
        q = q + np.linalg.solve(A, b[..., None])[..., 0]
    better = misfit(q) < misfit(q0)
    graph.targets = np.where(better[:, None], q, q0)


def _lm_step(cur, e_cur, graph, mu, cfg):
    """One damped step; returns (field, energy, mu, accepted)."""
    off, diag, g = _normal_equations(cur, graph)
    for _ in range(cfg.max_damping_steps):
        A = off + sp.diags(diag * (1.0 + mu) + 1e-9)
        eps = -spsolve(A.tocsc(), g)
        if np.all(np.isfinite(eps)):
            cand = _step(cur, eps)
            e_new = energy(cand, graph)
            if e_new < e_cur:
                return cand, e_new, max(mu / 3.0, 1e-12), True
        mu *= 10
    return cur, e_cur, mu, False


def _descend(cur, graph, cfg, refresh):
    """LM descent with fixed targets (or ICP refresh); returns (field, energies, iters, warning)."""
    if refresh:
        graph.refresh(cur)
    e_cur = energy(cur, graph)
    energies = [e_cur]
    mu = cfg.initial_damping
    it = 0
    warning = None
    while it < cfg.max_iters and e_cur > 1e-24:
        if refresh:
            graph.refresh(cur)
            e_ref = energy(cur, graph)
            assert e_ref <= e_cur * (1 + 1e-12) + 1e-15, "correspondence refresh raised the energy"
            e_cur = e_ref
        cand, e_new, mu, ok = _lm_step(cur, e_cur, graph, mu, cfg)
        it += 1
        if not ok:
            if energies[-1] > 0 and (energies[-1] - e_cur) / energies[-1] >= cfg.tol:
                warning = "damping exhausted before convergence"
                log.warning("rigid flow: %s (E=%.6g)", warning, e_cur)
            if e_cur < energies[-1]:
                energies.append(e_cur)
            break
        rel = (e_cur - e_new) / e_cur
        cur, e_cur = cand, e_new
        energies.append(e_cur)
        if rel < cfg.tol:
            break
    return cur, energies, it, warning


def minimize(graph: FlowGraph, xyz1=None, xyz2=None, init: MotionField | None = None,
             cfg: FlowConfig = FlowConfig()) -> MotionField:
    """Run the target stages and return the field.

    ``xyz1``/``xyz2`` are accepted for interface symmetry; the graph already
    holds the keypoint sources and the scan-2 search tree. The result records every stage's energies (``stages`` marks where each
    starts), the total number of outer iterations and the last warning.
    """
    n = graph.n_points
    cur = init.copy() if init is not None else MotionField.identity(n)
    if len(cur) != n:
        raise DataError("init field size does not match the graph")
    energies, stages, total, warning = [], [], 0, None

    def run(refresh):
        nonlocal cur, total, warning
        cur, es, it, w = _descend(cur, graph, cfg, refresh)
        stages.append(len(energies))
        energies.extend(es)
        total += it
        warning = w or warning

    if graph.patches is None:
        run(refresh=True)
    else:
        coarse_targets(graph, cur, cfg)
        run(refresh=False)
        for _ in range(cfg.refine_rounds):
            refine_targets(graph, cur, cfg)
            run(refresh=False)
    assert cur.is_rigid(1e-9)
    cur.energies, cur.stages, cur.iterations, cur.warning = energies, stages, total, warning
    return cur


def segment_ground(xyz, threshold=0.1, iters=200, seed=0) -> np.ndarray:
    """Boolean mask of points on the dominant near-horizontal plane below the sensor.

    RANSAC over the lower half of the cloud (by height) with planes whose
    normal is within ~25 deg of vertical, followed by a least-squares refit on
    the inliers.
    """
    xyz = np.asarray(xyz, dtype=float)
    n = len(xyz)
    mask = np.zeros(n, dtype=bool)
    if n < 3:
        return mask
    low = xyz[xyz[:, 2] <= np.median(xyz[:, 2])]
    if len(low) < 3:
        return mask
    rng = np.random.default_rng(seed)
    best, best_count = None, 0
    for _ in range(iters):
        a, b, c = low[rng.choice(len(low), 3, replace=False)]
        nrm = np.cross(b - a, c - a)
        nn = np.linalg.norm(nrm)
        if nn < 1e-9:
            continue
        nrm /= nn
        if abs(nrm[2]) < 0.9:
            continue
        count = int(np.sum(np.abs((low - a) @ nrm) < threshold))
        if count > best_count:
            best, best_count = (a, nrm), count
    if best is None:
        return mask
    a, nrm = best
    inl = xyz[np.abs((xyz - a) @ nrm) < threshold]
    centroid = inl.mean(axis=0)
    _, _, Vt = np.linalg.svd(inl - centroid, full_matrices=False)
    nrm = Vt[2]
    return np.abs((xyz - centroid) @ nrm) < threshold


class RangeLookup:
    """Range of scan 2 along arbitrary rays, from its spherical image.

    For each query the nearest returns of the same elevation row on either
    side (at most ``max_gap`` columns away) are looked up. If they differ by
    less than ``max_jump`` metres they are interpolated linearly in azimuth;
    across a larger jump both are kept, since the query may lie on either
    side of the depth edge.
    """

    def __init__(self, xyz2, pcfg=None, max_gap=4, max_jump=1.0):
        from .projection import ProjectionConfig, pixel_coords

        self.pcfg = pcfg or ProjectionConfig()
        self.max_gap, self.max_jump = max_gap, max_jump
        W = self.pcfg.width
        row, _, rng = pixel_coords(xyz2, self.pcfg)
        u = self._u(xyz2)
        ok = row >= 0
        row, u, rng = row[ok], u[ok], rng[ok]
        # nearest return per pixel
        col = np.floor(u).astype(np.int64) % W
        order = np.lexsort((rng, col, row))
        first = np.r_[True, (np.diff(row[order]) != 0) | (np.diff(col[order]) != 0)]
        keep = order[first]
        row, u, rng = row[keep], u[keep], rng[keep]
        # copies one turn either side make the azimuth wrap seamless
        span = 3 * W
        self.keys = np.concatenate([row * span + u + W + s for s in (-W, 0, W)])
        srt = np.argsort(self.keys, kind="stable")
        self.keys = self.keys[srt]
        self.rng = np.tile(rng, 3)[srt]
        self.span = span

    def _u(self, xyz):
        az = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
        return (az + 180.0) / 360.0 * self.pcfg.width

    def expected(self, xyz):
        """``(near, far, in_view)``: candidate ranges (NaN without a return) and
        whether the ray is inside the vertical field of view at all."""
        from .projection import pixel_coords

        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        nan = np.full(len(xyz), np.nan)
        row, _, _ = pixel_coords(xyz, self.pcfg) if len(xyz) else (np.zeros(0, np.int64),) * 3
        in_view = row >= 0
        if len(self.keys) == 0 or len(xyz) == 0:
            return nan, nan.copy(), in_view
        W = self.pcfg.width
        q = row * self.span + (self._u(xyz) % W) + W
        hi = np.clip(np.searchsorted(self.keys, q), 1, len(self.keys) - 1)
        lo = hi - 1
        kl, kh = self.keys[lo], self.keys[hi]
        ok_l = in_view & (kl // self.span == row) & (q - kl <= self.max_gap)
        ok_h = in_view & (kh // self.span == row) & (kh - q <= self.max_gap)
        rl = np.where(ok_l, self.rng[lo], np.nan)
        rh = np.where(ok_h, self.rng[hi], np.nan)
        smooth = ok_l & ok_h & (np.abs(rl - rh) < self.max_jump)
        w = np.where(smooth, (q - kl) / np.maximum(kh - kl, 1e-12), 0.0)
        interp = rl + w * (rh - rl)
        a = np.where(smooth, interp, np.where(ok_l, rl, rh))
        b = np.where(smooth, interp, np.where(ok_h, rh, rl))
        return np.fmin(a, b), np.fmax(a, b), in_view


def _shift_scores(lookup, pts, shifts, trunc):
    """Mean truncated squared range residual of ``pts + shift`` for every shift.

    A ray with no scan-2 return nearby costs the full truncation. A point
    hidden behind a nearer scan-2 surface, or outside the field of view, is
    neither confirmed nor refuted and costs half of it.
    """
    probes = (pts[None, :, :] + shifts[:, None, :]).reshape(-1, 3)
    r = np.linalg.norm(probes, axis=1)
    near, far, in_view = lookup.expected(probes)
    s_near, s_far = r - near, r - far
    # the candidate the point agrees with best
    signed = np.where(np.abs(s_far) < np.abs(s_near), s_far, s_near)
    signed = np.where(np.isnan(signed), s_near, signed)
    d = np.where(np.isnan(signed), trunc, np.minimum(np.abs(signed), trunc))
    d = np.where((signed > trunc) | ~in_view, 0.5 * trunc, d).reshape(len(shifts), -1)
    return np.mean(d * d, axis=1)


def _grid(center, half, step):
    ticks = np.arange(-half, half + 1e-9, step)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    g = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    return g + center


def segment_shifts(xyz1, xyz2, init: MotionField, cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    """Per-point xy translation to add to ``init``, constant over each Euclidean segment.

    A segment's shift is the grid point (coarse, then two finer levels) that
    minimizes the truncated range residual of its init-predicted points
    against the range image of scan 2 (projective association, see
    :class:`RangeLookup`); ``xyz2`` should therefore be the whole scan,
    ground included, so that vacated pixels show what is behind.
    The shift is only kept when it cuts the misfit of the unshifted
    prediction by the factor ``segment_gain`` and by at least
    ``segment_margin``, so static structure and surfaces that could slide
    along themselves stay at the init. Points predicted beyond the farthest
    scan-2 return (less the search radius) are not scored. Deciding per segment rather than per
    keypoint sees a whole face, which is what disambiguates a plane moving
    parallel to itself.
    """
    from .cluster_eval import cluster_points

    n = len(xyz1)
    out = np.zeros((n, 3))
    if not cfg.segment_radius or cfg.search_radius <= 0 or n == 0 or len(xyz2) == 0:
        return out
    lookup = RangeLookup(xyz2)
    pred = init.apply(xyz1)
    trunc = cfg.patch_trunc
    # points that may have left the sensor's reach say nothing about motion
    reach = np.linalg.norm(xyz2, axis=1).max() - cfg.search_radius
    seen = np.linalg.norm(pred, axis=1) <= reach
    for cl in cluster_points(xyz1, None, cfg.segment_radius, cfg.segment_min_points):
        idx = cl.indices[seen[cl.indices]]
        if len(idx) < cfg.segment_min_points:
            continue
        # one sample per voxel weighs surfaces by area, not by point density
        idx = idx[voxel_representatives(xyz1[idx], cfg.segment_voxel)]
        pick = np.unique(np.linspace(0, len(idx) - 1, min(cfg.segment_samples, len(idx))).round().astype(np.int64))
        pts = pred[idx[pick]]
        zero = np.zeros((1, 3))
        base = _shift_scores(lookup, pts, zero, trunc)[0]
        step = cfg.segment_step
        grid = _grid(zero[0], cfg.search_radius, step)
        sc = _shift_scores(lookup, pts, grid, trunc)
        best = grid[np.argmin(sc)]
        for _ in range(2):
            fine = _grid(best, step, step / 5)
            sc = _shift_scores(lookup, pts, fine, trunc)
            best = fine[np.argmin(sc)]
            step /= 5
        score = sc.min()
        if score < cfg.segment_gain * base and base - score > cfg.segment_margin:
            out[cl.indices] = best
    return out


def estimate_flow(xyz1, xyz2, cfg: FlowConfig = FlowConfig(), init: MotionField | None = None) -> MotionField:
    """Ground removal, segment initialization, keypoints, graph and minimization.

    Ground points of scan 1 keep their ``init`` transform (static ground);
    ground points of scan 2 are not correspondence candidates. The remaining
    scan-1 points first get their segment's shift (:func:`segment_shifts`),
    then the graph is solved on voxel representatives (``solve_voxel``) and
    each point copies the transform of its nearest representative
    (``solved`` lists them).
    """
    xyz1 = np.asarray(getattr(xyz1, "xyz", xyz1), dtype=float)
    xyz2 = np.asarray(getattr(xyz2, "xyz", xyz2), dtype=float)
    n = len(xyz1)
    full = init.copy() if init is not None else MotionField.identity(n)
    if len(full) != n:
        raise DataError("init field size does not match the first scan")
    if cfg.ground_threshold is not None:
        g1 = segment_ground(xyz1, cfg.ground_threshold)
        g2 = segment_ground(xyz2, cfg.ground_threshold)
    else:
        g1 = np.zeros(n, dtype=bool)
        g2 = np.zeros(len(xyz2), dtype=bool)
    ng = np.flatnonzero(~g1)
    sub2 = xyz2[~g2] if (~g2).any() else xyz2
    full.ground = g1
    full.keypoints = Keypoints(np.zeros(0, dtype=np.int64), np.zeros(0))
    if len(ng) < max(cfg.min_keypoints, 2) or len(sub2) == 0:
        return full
    full.t[ng] += segment_shifts(xyz1[ng], xyz2, MotionField(full.R[ng], full.t[ng]), cfg)
    sub = ng[voxel_representatives(xyz1[ng], cfg.solve_voxel)]
    if len(sub) < max(cfg.min_keypoints, 2):
        sub = ng
    sinit = MotionField(full.R[sub], full.t[sub])
    kp = select_keypoints(xyz1[sub], cfg)
    graph = build_graph(xyz1[sub], kp, sub2, cfg, sinit)
    res = minimize(graph, init=sinit, cfg=cfg)
    # every non-ground point follows its nearest representative
    _, near = cKDTree(xyz1[sub]).query(xyz1[ng])
    full.R[ng] = res.R[near]
    full.t[ng] = res.t[near]
    full.energies, full.stages = res.energies, res.stages
    full.iterations, full.warning = res.iterations, res.warning
    full.keypoints = Keypoints(sub[kp.indices], kp.scores, kp.fallback)
    full.solved = sub
    return full


def write_motion_csv(path, field_: MotionField) -> None:
    rv = field_.rotvecs()
    with open(path, "w") as fh:
        fh.write("index,tx,ty,tz,rx,ry,rz\n")
        for k in range(len(field_)):
            t = field_.t[k]
            fh.write(f"{k},{t[0]:.6f},{t[1]:.6f},{t[2]:.6f},{rv[k, 0]:.6f},{rv[k, 1]:.6f},{rv[k, 2]:.6f}\n")
