"""Recursive three-state belief per point: non-movable, movable, dynamic.

Each frame multiplies the predicted belief by a motion likelihood derived
from the dynamicity score and an object likelihood derived from
accumulated objectness log-odds, then normalizes.

    motion:  (1 - delta, 1 - delta, delta)
    object:  (1 - p, p, s * p),  p = sigmoid(L)
    L_t   =  l(xi_t) + L_{t-1} - l(o0)

Beliefs are carried between scans by moving the previous points with their
estimated motion and matching each to the nearest current point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError
from .geometry import se3_log

MODES = ("recursive", "instantaneous", "off")
EXPERIMENT_MODES = {"exp1": "recursive", "exp2": "instantaneous", "exp3": "off"}
XI_CLAMP = 1e-6

DEFAULT_SIGMA = np.diag([0.05**2] * 3 + [np.radians(1.0) ** 2] * 3)
DEFAULT_TRANSITION = np.array([
    [0.90, 0.05, 0.05],
    [0.02, 0.90, 0.08],
    [0.02, 0.08, 0.90],
])


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # two branches so neither exp overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class FilterConfig:
    sigma: np.ndarray = field(default_factory=lambda: DEFAULT_SIGMA.copy())
    o0: float = 0.2
    s: float = 0.6
    transition: np.ndarray = field(default_factory=lambda: DEFAULT_TRANSITION.copy())
    mode: str = "recursive"
    match_radius: float = 0.3

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.transition = np.asarray(self.transition, dtype=float)
        if self.mode in EXPERIMENT_MODES:
            self.mode = EXPERIMENT_MODES[self.mode]
        self.validate()

    def validate(self):
        if self.sigma.shape != (6, 6):
            raise ConfigError(f"motion covariance must be 6x6, got {self.sigma.shape}")
        if not np.allclose(self.sigma, self.sigma.T, rtol=0, atol=1e-15):
            raise ConfigError("motion covariance is not symmetric")
        try:
            np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError:
            raise ConfigError("motion covariance is not positive definite") from None
        A = self.transition
        if A.shape != (3, 3) or np.any(A < 0) or np.abs(A.sum(axis=1) - 1).max() > 1e-9:
            raise ConfigError("transition matrix must be 3x3, non-negative and row-stochastic")
        if not 0.0 < self.o0 < 1.0:
            raise ConfigError(f"prior object probability must lie in (0, 1), got {self.o0}")
        if not 0.0 <= self.s <= 1.0:
            raise ConfigError(f"dynamic scaling must lie in [0, 1], got {self.s}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown object update mode {self.mode!r}")
        if self.match_radius <= 0:
            raise ConfigError("match radius must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> FilterConfig:
        d = dict(d or {})
        if "sigma_translation" in d or "sigma_rotation_deg" in d:
            st = float(d.pop("sigma_translation", 0.05))
            sr = np.radians(float(d.pop("sigma_rotation_deg", 1.0)))
            d["sigma"] = np.diag([st**2] * 3 + [sr**2] * 3)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad filter config: {exc}") from None

    @property
    def prior(self) -> np.ndarray:
        """Belief of a never-seen point: object mass o0 split evenly over movable and dynamic."""
        return np.array([1.0 - self.o0, self.o0 / 2, self.o0 / 2])


def dynamicity(R, t, odom, sigma=DEFAULT_SIGMA) -> np.ndarray:
    """delta = 1 - exp(-r' Sigma^-1 r / 2) with r = log(odom^-1 tau), per point.

    ``R`` (N, 3, 3) and ``t`` (N, 3) hold the estimated motions; ``odom`` is a
    :class:`Pose`.
    """
    sigma = np.asarray(sigma, dtype=float)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ConfigError("motion covariance is singular or indefinite") from None
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    t = np.asarray(t, dtype=float).reshape(-1, 3)
    Ro, to = odom.rotation, odom.translation
    Rr = np.einsum("ji,njk->nik", Ro, R)
    tr = (t - to) @ Ro
    r = np.atleast_2d(se3_log(Rr, tr))
    w = np.linalg.solve(chol, r.T)
    d2 = np.sum(w * w, axis=0)
    return -np.expm1(-0.5 * d2)


def motion_likelihood(delta) -> np.ndarray:
    delta = np.clip(np.asarray(delta, dtype=float), 0.0, 1.0)
    return np.stack([1.0 - delta, 1.0 - delta, delta], axis=-1)


def logodds_update(L_prev, xi, o0=0.2):
    xi = np.clip(np.asarray(xi, dtype=float), XI_CLAMP, 1.0 - XI_CLAMP)
    return logit(xi) + np.asarray(L_prev, dtype=float) - logit(o0)


def object_likelihood(L, s=0.6, state=None) -> np.ndarray:
    """(1 - p, p, s p) with p = sigmoid(L); a single column when ``state`` is given."""
    p = sigmoid(L)
    lik = np.stack([1.0 - p, p, s * p], axis=-1)
    return lik if state is None else lik[..., state]


@dataclass
class Belief:
    """Per-point probability triples, object log-odds and last update frame."""

    probs: np.ndarray
    L: np.ndarray
    frame: np.ndarray
    degenerate: np.ndarray = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float).reshape(-1, 3)
        self.L = np.asarray(self.L, dtype=float).reshape(-1)
        self.frame = np.asarray(self.frame, dtype=np.int64).reshape(-1)
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.L), dtype=bool)
        if not (len(self.probs) == len(self.L) == len(self.frame)):
            raise DataError("belief arrays are misaligned")

    def __len__(self):
        return len(self.L)

    @classmethod
    def prior(cls, n, cfg: FilterConfig = None) -> Belief:
        cfg = cfg or FilterConfig()
        return cls(np.tile(cfg.prior, (n, 1)), np.full(n, logit(cfg.o0)), np.full(n, -1))

    @classmethod
    def uniform(cls, n, L=0.0) -> Belief:
        return cls(np.full((n, 3), 1.0 / 3.0), np.full(n, float(L)), np.full(n, -1))

    def copy(self) -> Belief:
        return Belief(self.probs.copy(), self.L.copy(), self.frame.copy(), self.degenerate.copy())


def step(bel: Belief, delta, xi, cfg: FilterConfig = None, frame=None) -> Belief:
    """One predict-update cycle; ``delta=None`` means no motion measurement."""
    cfg = cfg or FilterConfig()
    n = len(bel)
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if len(xi) != n:
        raise DataError(f"{len(xi)} objectness scores for {n} points")
    if delta is None:
        motion = np.ones((n, 3))
    else:
        delta = np.asarray(delta, dtype=float).reshape(-1)
        if len(delta) != n:
            raise DataError(f"{len(delta)} dynamicity scores for {n} points")
        motion = motion_likelihood(delta)

    predicted = bel.probs @ cfg.transition
    if cfg.mode == "recursive":
        L = logodds_update(bel.L, xi, cfg.o0)
        obj = object_likelihood(L, cfg.s)
    elif cfg.mode == "instantaneous":
        L = logodds_update(logit(cfg.o0), xi, cfg.o0)
        obj = object_likelihood(L, cfg.s)
    else:
        L = bel.L.copy()
        obj = np.ones((n, 3))

    u = motion * obj * predicted
    z = u.sum(axis=1)
    bad = ~(z > 0)
    probs = np.empty_like(u)
    probs[~bad] = u[~bad] / z[~bad, None]
    probs[bad] = predicted[bad]
    new_frame = bel.frame + 1 if frame is None else np.full(n, frame)
    return Belief(probs, L, new_frame, bad)


def classify(probs) -> np.ndarray:
    """Argmax of each triple; exact ties resolve toward non-movable, then movable."""
    probs = np.asarray(getattr(probs, "probs", probs), dtype=float).reshape(-1, 3)
    return np.argmax(probs, axis=1).astype(np.int64)


def associate(prev_xyz, motion_apply, cur_xyz, radius=0.3):
    """Index of the previous point each current point inherits from, or -1.

    ``motion_apply`` maps previous-scan coordinates into the current scan (the
    estimated motion field's ``apply``), or is an already transported array.
    Each previous point passes its belief to at most one current point: the
    nearest one, with ties to the lower index.
    """
    prev_xyz = np.asarray(prev_xyz, dtype=float).reshape(-1, 3)
    cur_xyz = np.asarray(cur_xyz, dtype=float).reshape(-1, 3)
    moved = motion_apply(prev_xyz) if callable(motion_apply) else np.asarray(motion_apply, dtype=float)
    src = np.full(len(cur_xyz), -1, dtype=np.int64)
    if len(moved) == 0 or len(cur_xyz) == 0:
        return src
    d, j = cKDTree(cur_xyz).query(moved, distance_upper_bound=radius)
    ok = np.isfinite(d)
    i = np.flatnonzero(ok)
    j, d = j[ok], d[ok]
    order = np.lexsort((i, d, j))
    first = np.r_[True, j[order][1:] != j[order][:-1]]
    src[j[order][first]] = i[order][first]
    return src


def carry(bel: Belief, src, cfg: FilterConfig = None) -> Belief:
    """Belief for the current points: inherited where ``src >= 0``, prior elsewhere."""
    cfg = cfg or FilterConfig()
    src = np.asarray(src, dtype=np.int64)
    out = Belief.prior(len(src), cfg)
    ok = src >= 0
    out.probs[ok] = bel.probs[src[ok]]
    out.L[ok] = bel.L[src[ok]]
    out.frame[ok] = bel.frame[src[ok]]
    return out
