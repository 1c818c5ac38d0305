"""Calibrated two-view geometry.

Convention throughout: a point ``X1`` in the first camera frame maps to
``X2 = R @ X1 + t`` in the second, so ``E = [t]x R`` and exact calibrated
correspondences satisfy ``x2^T E x1 = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CheiralityAmbiguous, DegenerateLine, ParallelRays

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Relative pose ``(R, t)`` with ``t`` a unit direction."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(t)
        if not np.isfinite(n) or n < 1e-15:
            raise ValueError("translation direction must be nonzero")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a rotation matrix")
        object.__setattr__(self, "R", R)
        # leave an already-unit direction untouched so poses round-trip through text exactly
        object.__setattr__(self, "t", t if abs(n - 1.0) <= 4e-16 else t / n)

    @classmethod
    def identity_rotation(cls, t) -> "Pose":
        return cls(np.eye(3), t)


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics; pixel centres sit at integer coordinates."""

    f: float
    cx: float
    cy: float

    def normalize(self, pixels) -> np.ndarray:
        p = np.asarray(pixels, dtype=np.float64)
        return np.stack([(p[..., 0] - self.cx) / self.f, (p[..., 1] - self.cy) / self.f], axis=-1)

    def to_pixels(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.stack([p[..., 0] * self.f + self.cx, p[..., 1] * self.f + self.cy], axis=-1)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def homogeneous(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def rotation_about(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = skew(a)
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def _sign_fix(E: np.ndarray) -> np.ndarray:
    k = np.argmax(np.abs(E))
    return -E if E.flat[k] < 0 else E


def project_essential(E) -> np.ndarray:
    """Nearest essential matrix, Frobenius norm 1, largest-magnitude entry positive."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    P = U[:, :2] @ Vt[:2] / np.sqrt(2.0)
    return _sign_fix(P)


def project_essential_batch(Es: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(Es)
    P = np.einsum("nik,nkj->nij", U[:, :, :2], Vt[:, :2, :]) / np.sqrt(2.0)
    flat = P.reshape(len(P), 9)
    k = np.argmax(np.abs(flat), axis=1)
    sign = np.where(flat[np.arange(len(P)), k] < 0, -1.0, 1.0)
    return P * sign[:, None, None]


def essential_from_pose(pose: Pose) -> np.ndarray:
    return _sign_fix(skew(pose.t) @ pose.R / np.sqrt(2.0))


def triangulate(pose: Pose, x1, x2):
    """Linear (DLT) triangulation of one calibrated correspondence.

    Returns the 3D point in the first camera frame and its depth in each
    camera.  Raises ``ParallelRays`` if the viewing rays are parallel.
    """
    X, d1, d2, parallel = triangulate_many(pose, np.atleast_2d(x1), np.atleast_2d(x2))
    if parallel[0]:
        raise ParallelRays("viewing rays are parallel")
    return X[0], (d1[0], d2[0])


def triangulate_many(pose: Pose, x1, x2):
    """Vectorised DLT; returns ``(X, depth1, depth2, parallel_mask)``."""
    return _triangulate_rt(pose.R, pose.t, x1, x2)


def _triangulate_rt(R, t, x1, x2):
    q1 = homogeneous(x1)
    q2 = homogeneous(x2)
    r1 = q1 / np.linalg.norm(q1, axis=1, keepdims=True)
    r2 = q2 @ R
    r2 = r2 / np.linalg.norm(r2, axis=1, keepdims=True)
    parallel = np.linalg.norm(np.cross(r1, r2), axis=1) < 1e-12

    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t.reshape(3, 1)])
    A = np.empty((len(q1), 4, 4))
    A[:, 0] = q1[:, :1] * P1[2] - P1[0]
    A[:, 1] = q1[:, 1:2] * P1[2] - P1[1]
    A[:, 2] = q2[:, :1] * P2[2] - P2[0]
    A[:, 3] = q2[:, 1:2] * P2[2] - P2[1]
    # row-normalise for conditioning; the null vector is unchanged
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / Xh[:, 3:4]
    d1 = X[:, 2]
    d2 = X @ R[2] + t[2]
    return X, d1, d2, parallel


def decomposition_candidates(E) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four ``(R, t)`` factorisations of ``E`` in fixed order."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def count_in_front(R, t, x1, x2) -> int:
    _, d1, d2, parallel = _triangulate_rt(R, t, x1, x2)
    ok = (~parallel) & np.isfinite(d1) & np.isfinite(d2) & (d1 > 0) & (d2 > 0)
    return int(ok.sum())


def decompose_essential(E, x1, x2) -> Pose:
    """Pick the decomposition with the most points in front of both cameras.

    Ties go to the earliest candidate in the order (R1,+t), (R1,-t),
    (R2,+t), (R2,-t).
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    if len(x1) == 0:
        raise ValueError("need at least one correspondence")
    best, best_count = None, 0
    for R, t in decomposition_candidates(E):
        c = count_in_front(R, t, x1, x2)
        if c > best_count:
            best, best_count = (R, t), c
    if best is None:
        raise CheiralityAmbiguous("no decomposition puts any point in front of both cameras")
    return Pose(best[0], best[1])


def epipolar_distances(E, x1, x2) -> np.ndarray:
    """Vectorised max-of-two point-to-epipolar-line distance.

    Where one line is degenerate the other distance is used; ``inf`` where
    both are.
    """
    q1 = homogeneous(x1)
    q2 = homogeneous(x2)
    l2 = q1 @ E.T  # lines in image 2: E q1
    l1 = q2 @ E  # lines in image 1: E^T q2
    alg = np.einsum("ni,ni->n", q2, l2)
    n2 = np.hypot(l2[:, 0], l2[:, 1])
    n1 = np.hypot(l1[:, 0], l1[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.where(n2 > 0, np.abs(alg) / n2, -np.inf)
        d1 = np.where(n1 > 0, np.abs(alg) / n1, -np.inf)
    d = np.maximum(d1, d2)
    return np.where(np.isneginf(d), np.inf, d)


def epipolar_distances_batch(Es, x1, x2) -> np.ndarray:
    """``epipolar_distances`` for a stack of (m, 3, 3) matrices; returns (m, n)."""
    q1 = homogeneous(x1)
    q2 = homogeneous(x2)
    l2 = np.einsum("mij,nj->mni", Es, q1)
    l1 = np.einsum("mji,nj->mni", Es, q2)
    alg = np.abs(np.einsum("ni,mni->mn", q2, l2))
    n2 = np.hypot(l2[..., 0], l2[..., 1])
    n1 = np.hypot(l1[..., 0], l1[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.maximum(np.where(n1 > 0, alg / n1, -np.inf), np.where(n2 > 0, alg / n2, -np.inf))
    return np.where(np.isneginf(d), np.inf, d)


def epipolar_line_distance(E, x1, x2) -> float:
    d = epipolar_distances(np.asarray(E, dtype=np.float64), np.atleast_2d(x1), np.atleast_2d(x2))[0]
    if np.isinf(d):
        raise DegenerateLine("both epipolar lines are degenerate")
    return float(d)


def rotation_angle_deg(R_a, R_b) -> float:
    D = np.asarray(R_a).T @ np.asarray(R_b)
    c = (np.trace(D) - 1.0) / 2.0
    s = np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]]) / 2.0
    return float(np.degrees(np.arctan2(s, c)))


def direction_angle_deg(a, b) -> float:
    """Angle between two lines through the origin (sign-agnostic)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(a @ b))))


def angular_pose_error(est: Pose, gt: Pose) -> float:
    """max(rotation angle, translation angle) in degrees."""
    return max(rotation_angle_deg(est.R, gt.R), direction_angle_deg(est.t, gt.t))
