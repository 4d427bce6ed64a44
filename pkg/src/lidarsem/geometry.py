"""Rigid transforms: the Pose type plus batched SE(3) exp/log maps.

Twists are 6-vectors ordered (translation rho, rotation phi), matching the
layout of the motion covariance used by the Bayes filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


def skew(v):
    """Batched cross-product matrices, shape (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def orthonormalize(R):
    """Nearest proper rotation(s) in the Frobenius sense (polar factor via SVD)."""
    R = np.asarray(R, dtype=float)
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def _series(theta):
    """Coefficients a=(1-cos)/t^2, b=(t-sin)/t^3 and the V^-1 term c, safe near 0."""
    t2 = theta * theta
    small = theta < 1e-4
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(ts)) / ts**2)
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (ts - np.sin(ts)) / ts**3)
    half = ts / 2.0
    c_big = (1.0 - half * np.cos(half) / np.sin(np.maximum(half, 1e-300))) / ts**2
    c = np.where(small, 1.0 / 12.0 + t2 / 720.0, c_big)
    return a, b, c


def se3_exp(xi):
    """Map twists (..., 6) to (R (..., 3, 3), t (..., 3))."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    flat = phi.reshape(-1, 3)
    R = Rotation.from_rotvec(flat).as_matrix().reshape(phi.shape[:-1] + (3, 3))
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _series(theta)
    K = skew(phi)
    V = np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)
    t = np.einsum("...ij,...j->...i", V, rho)
    return R, t


def se3_log(R, t):
    """Inverse of :func:`se3_exp`; rotation angle is taken in [0, pi]."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    flat = R.reshape(-1, 3, 3)
    phi = Rotation.from_matrix(flat).as_rotvec().reshape(R.shape[:-2] + (3,))
    theta = np.linalg.norm(phi, axis=-1)
    _, _, c = _series(theta)
    K = skew(phi)
    Vinv = np.eye(3) - 0.5 * K + c[..., None, None] * (K @ K)
    rho = np.einsum("...ij,...j->...i", Vinv, t)
    return np.concatenate([rho, phi], axis=-1)


def relative(Ra, ta, Rb, tb):
    """Batched a^-1 * b."""
    RaT = np.swapaxes(Ra, -1, -2)
    return RaT @ Rb, np.einsum("...ij,...j->...i", RaT, tb - ta)


def is_rigid(R, tol=ORTHO_TOL):
    R = np.asarray(R, dtype=float)
    eye = np.eye(3)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max(axis=(-2, -1))
    det = np.linalg.det(R)
    return bool(np.all(err < tol) and np.all(np.abs(det - 1.0) < tol))


@dataclass(frozen=True)
class Pose:
    """A proper rigid transform x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> Pose:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_twist(cls, xi) -> Pose:
        R, t = se3_exp(np.asarray(xi, dtype=float))
        return cls(R, t)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> Pose:
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def log(self) -> np.ndarray:
        return se3_log(self.rotation, self.translation)

    def is_valid(self, tol=ORTHO_TOL) -> bool:
        return is_rigid(self.rotation, tol) and bool(np.all(np.isfinite(self.translation)))
