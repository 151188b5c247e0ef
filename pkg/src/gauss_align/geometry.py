"""Rigid-motion algebra, SE(3) exp/log, and neighbor queries.

Twists are plain length-6 arrays ordered ``(wx, wy, wz, vx, vy, vz)``:
rotation (axis-angle, radians) first, translation part second.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-9
_SMALL_ANGLE = 1e-6
# the Jacobian coefficients cancel catastrophically for small angles; use series there
_SERIES_ANGLE = 1e-2
# below this cosine the axis is read from the symmetric part of R
_NEAR_PI_COS = -0.99


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator: 3-vector -> 3x3 skew-symmetric matrix."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]], dtype=float)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation ``R`` plus translation ``t``; maps ``p`` to ``R @ p + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        if np.linalg.norm(R.T @ R - np.eye(3)) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("R is not a rotation matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        if M.shape == (16,):
            M = M.reshape(4, 4)
        if M.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: ``(a @ b)(p) == a(b(p))``."""
        return RigidTransform(_reortho(self.R @ other.R), self.R @ other.t + self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t


def _reortho(R: np.ndarray) -> np.ndarray:
    # project back onto SO(3); composition chains drift by ~1e-16 per step
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < _SMALL_ANGLE:
        A = 1.0 - theta**2 / 6.0
        B = 0.5 - theta**2 / 24.0
    else:
        A = np.sin(theta) / theta
        B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * W + B * (W @ W)


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < _SERIES_ANGLE:
        t2 = theta**2
        B = 0.5 - t2 / 24.0 + t2**2 / 720.0
        C = 1.0 / 6.0 - t2 / 120.0 + t2**2 / 5040.0
    else:
        B = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
        C = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + B * W + C * (W @ W)


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < _SERIES_ANGLE:
        t2 = theta**2
        D = 1.0 / 12.0 + t2 / 720.0 + t2**2 / 30240.0
    else:
        D = (1.0 - 0.5 * theta / np.tan(0.5 * theta)) / theta**2
    return np.eye(3) - 0.5 * W + D * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    v = 0.5 * vee(R - R.T)  # sin(theta) * axis
    s = np.linalg.norm(v)
    theta = np.arctan2(s, c)
    if c > _NEAR_PI_COS:
        if theta < _SMALL_ANGLE:
            return v * (1.0 + theta**2 / 6.0)
        return v * (theta / s)
    # near pi: axis from (R + R^T)/2 = c I + (1 - c) a a^T
    aaT = (0.5 * (R + R.T) - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(aaT)))
    axis = aaT[:, k] / np.sqrt(aaT[k, k])
    axis /= np.linalg.norm(axis)
    if axis @ v < 0:
        axis = -axis
    return theta * axis


def se3_exp(xi) -> RigidTransform:
    """Exponential map se(3) -> SE(3) via Rodrigues' closed form."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    return RigidTransform(so3_exp(omega), _left_jacobian(omega) @ v)


def se3_log(T: RigidTransform) -> np.ndarray:
    """Inverse of :func:`se3_exp`, with ``|omega| <= pi``."""
    omega = so3_log(T.R)
    return np.concatenate([omega, _left_jacobian_inv(omega) @ T.t])


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation in radians."""
    return float(np.linalg.norm(so3_log(R)))


@dataclass(frozen=True)
class ColoredPointCloud:
    """Positions in meters with per-point RGB in [0, 1].

    Points with ``color_mask == False`` carry the sentinel color (0, 0, 0).
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    color_mask: np.ndarray | None = None

    def __post_init__(self):
        P = np.array(self.positions, dtype=float).reshape(-1, 3)
        n = len(P)
        if self.colors is None:
            C = np.zeros((n, 3))
            M = np.zeros(n, dtype=bool) if self.color_mask is None else np.asarray(self.color_mask, bool)
        else:
            C = np.array(self.colors, dtype=float).reshape(-1, 3)
            M = np.ones(n, dtype=bool) if self.color_mask is None else np.array(self.color_mask, dtype=bool)
        if len(C) != n or M.shape != (n,):
            raise ValueError("positions, colors and color_mask must have equal length")
        if np.any(C < 0.0) or np.any(C > 1.0):
            raise ValueError("color channel outside [0, 1]")
        C = np.where(M[:, None], C, 0.0)
        for a in (P, C, M):
            a.setflags(write=False)
        object.__setattr__(self, "positions", P)
        object.__setattr__(self, "colors", C)
        object.__setattr__(self, "color_mask", M)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "ColoredPointCloud":
        return ColoredPointCloud(self.positions[idx], self.colors[idx], self.color_mask[idx])


def apply_transform(T: RigidTransform, cloud: ColoredPointCloud) -> ColoredPointCloud:
    return ColoredPointCloud(T.apply(cloud.positions), cloud.colors, cloud.color_mask)


class NeighborIndex:
    """Exact k-nearest / radius queries with ties broken by ascending index."""

    def __init__(self, positions: np.ndarray):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self.positions) if len(self.positions) else None

    def __len__(self) -> int:
        return len(self.positions)

    def _check(self):
        if self._tree is None:
            raise ValueError("empty point set")

    def query(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batch k-NN. Returns ``(distances, indices)`` of shape (Q, min(k, N))."""
        self._check()
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        kk = min(k, n)
        probe = min(kk + 1, n)
        d, idx = self._tree.query(q, k=probe)
        d = np.asarray(d, dtype=float).reshape(len(q), probe)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), probe)
        # exact distances so equal-distance points compare equal
        d = np.linalg.norm(self.positions[idx] - q[:, None, :], axis=2)
        out_d = np.empty((len(q), kk))
        out_i = np.empty((len(q), kk), dtype=np.int64)
        for row in range(len(q)):
            dr, ir = d[row], idx[row]
            if probe > kk and np.isclose(dr.max(), np.sort(dr)[kk - 1], rtol=0, atol=1e-12):
                # tie straddles the k boundary: gather the whole shell
                cand = np.asarray(self._tree.query_ball_point(q[row], np.sort(dr)[kk - 1] + 1e-9), dtype=np.int64)
                dr = np.linalg.norm(self.positions[cand] - q[row], axis=1)
                ir = cand
            order = np.lexsort((ir, dr))[:kk]
            out_d[row], out_i[row] = dr[order], ir[order]
        return out_d, out_i

    def radius(self, query: np.ndarray, r: float) -> np.ndarray:
        """Indices within distance ``r``, sorted by (distance, index)."""
        self._check()
        q = np.asarray(query, dtype=float).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, r), dtype=np.int64)
        if len(cand) == 0:
            return cand
        dist = np.linalg.norm(self.positions[cand] - q, axis=1)
        return cand[np.lexsort((cand, dist))]


def knn(index: NeighborIndex, query: np.ndarray, k: int) -> np.ndarray:
    """``min(k, N)`` nearest indices to a single query, ascending distance."""
    return index.query(np.asarray(query, dtype=float).reshape(1, 3), k)[1][0]


def voxel_downsample(cloud: ColoredPointCloud, voxel: float) -> ColoredPointCloud:
    """One centroid per occupied voxel (bins ``floor(p / voxel)``), ordered by voxel key."""
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    m = len(counts)
    pos = np.zeros((m, 3))
    np.add.at(pos, inv, cloud.positions)
    pos /= counts[:, None]
    mask = cloud.color_mask
    ncol = np.bincount(inv[mask], minlength=m)
    col = np.zeros((m, 3))
    np.add.at(col, inv[mask], cloud.colors[mask])
    has = ncol > 0
    col[has] /= ncol[has, None]
    return ColoredPointCloud(pos, np.clip(col, 0.0, 1.0), has)
