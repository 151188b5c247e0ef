"""Gaussian splats built from superpoint neighborhoods, pooled splat features,
and a truncated-SVD low-rank projector for the feature matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import RigidTransform

LAMBDA_RANGE = (0.01, 0.1)
TOPK_RANGE = (2, 5)
EIG_CLAMP = 1e-8


class DegenerateNeighborhood(ValueError):
    pass


def quat_to_rotmat(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """Batched ``quat_to_rotmat`` for ``(n, 4)`` (w, x, y, z) rows."""
    q = np.asarray(q, dtype=float).reshape(-1, 4)
    if len(q) == 0:
        return np.zeros((0, 3, 3))
    return Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()


def rotmats_to_quats(R: np.ndarray) -> np.ndarray:
    """Batched ``rotmat_to_quat``: (w, x, y, z) rows with w >= 0."""
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    if len(R) == 0:
        return np.zeros((0, 4))
    q = Rotation.from_matrix(R).as_quat()[:, [3, 0, 1, 2]]
    return np.where(q[:, :1] < 0, -q, q)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.asarray(q, dtype=float)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def splat_covariance(r, s, lam: float, n) -> np.ndarray:
    """Ro(r) diag(exp(s)) Ro(r)^T + lam n n^T."""
    Ro = quat_to_rotmat(r)
    n = np.asarray(n, dtype=float)
    cov = Ro @ np.diag(np.exp(s)) @ Ro.T + lam * np.outer(n, n)
    return 0.5 * (cov + cov.T)


def _sign_fix(n: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(n) > 1e-12)
    if len(nz) and n[nz[0]] < 0:
        return -n
    return n


def _neighborhood_eig(points: np.ndarray):
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise DegenerateNeighborhood("degenerate neighborhood")
    S = np.cov(P.T, bias=True)
    w, Q = np.linalg.eigh(S)
    if w[2] <= 0 or w[1] <= 1e-12 * w[2]:
        raise DegenerateNeighborhood("degenerate neighborhood")
    return S, w, Q


def estimate_normal(neighborhood) -> np.ndarray:
    """Smallest-eigenvalue eigenvector of the neighborhood covariance.

    Sign convention: the first non-zero component is positive.
    """
    _, _, Q = _neighborhood_eig(neighborhood)
    n = Q[:, 0]
    return _sign_fix(n / np.linalg.norm(n))


@dataclass
class GaussianSplat:
    mu: np.ndarray
    r: np.ndarray
    s: np.ndarray
    n: np.ndarray
    lam: float
    alpha: float = 1.0
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rgb: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cov: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(3)
        self.r = np.asarray(self.r, dtype=float).reshape(4)
        self.r = self.r / np.linalg.norm(self.r)
        self.s = np.asarray(self.s, dtype=float).reshape(3)
        self.n = np.asarray(self.n, dtype=float).reshape(3)
        self.n = self.n / np.linalg.norm(self.n)
        self.feature = np.asarray(self.feature, dtype=float).reshape(-1)
        self.rgb = np.asarray(self.rgb, dtype=float).reshape(3)
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("opacity must lie in (0, 1]")
        if self.cov is None:
            self.cov = splat_covariance(self.r, self.s, self.lam, self.n)


def build_splat(center, neighborhood, lam: float, feature=None, colors=None,
                alpha: float = 1.0, check_lambda: bool = True) -> GaussianSplat:
    """Gaussian splat for one superpoint.

    Rotation and log-scales come from the eigendecomposition of the
    neighborhood's sample covariance; the estimated normal is added with
    strength ``lam``. ``check_lambda=False`` permits values outside the
    usual [0.01, 0.1] band (tests use 0).
    """
    if check_lambda and not LAMBDA_RANGE[0] <= lam <= LAMBDA_RANGE[1]:
        raise ValueError(f"lambda must lie in [{LAMBDA_RANGE[0]}, {LAMBDA_RANGE[1]}], got {lam}")
    _, w, Q = _neighborhood_eig(neighborhood)
    if np.linalg.det(Q) < 0:
        Q = Q.copy()
        Q[:, 0] = -Q[:, 0]
    n = _sign_fix(Q[:, 0] / np.linalg.norm(Q[:, 0]))
    s = np.log(np.maximum(w, EIG_CLAMP))
    rgb = np.zeros(3) if colors is None or len(colors) == 0 else np.asarray(colors, float).reshape(-1, 3).mean(axis=0)
    return GaussianSplat(mu=center, r=rotmat_to_quat(Q), s=s, n=n, lam=lam, alpha=alpha,
                         feature=np.zeros(0) if feature is None else feature, rgb=rgb)


def build_splats(centers, neighborhoods, lam: float, colors=None, color_mask=None,
                 check_lambda: bool = True) -> tuple["SplatSet", np.ndarray]:
    """Vectorized ``build_splat`` over equally sized neighborhoods (M x k x 3).

    Degenerate neighborhoods are dropped; returns the splats and the indices of
    the centers that were kept. ``colors`` (M x k x 3) are averaged over the
    entries allowed by ``color_mask`` (M x k).
    """
    if check_lambda and not LAMBDA_RANGE[0] <= lam <= LAMBDA_RANGE[1]:
        raise ValueError(f"lambda must lie in [{LAMBDA_RANGE[0]}, {LAMBDA_RANGE[1]}], got {lam}")
    C = np.asarray(centers, dtype=float).reshape(-1, 3)
    N = np.asarray(neighborhoods, dtype=float).reshape(len(C), -1, 3)
    if N.shape[1] < 3:
        raise DegenerateNeighborhood("degenerate neighborhood")
    D = N - N.mean(axis=1, keepdims=True)
    S = np.einsum("mka,mkb->mab", D, D) / N.shape[1]
    w, Q = np.linalg.eigh(S)
    keep = np.flatnonzero((w[:, 2] > 0) & (w[:, 1] > 1e-12 * w[:, 2]))
    w, Q, C = w[keep], Q[keep].copy(), C[keep]
    flip = np.linalg.det(Q) < 0
    Q[flip, :, 0] *= -1
    n = Q[:, :, 0] / np.linalg.norm(Q[:, :, 0], axis=1, keepdims=True)
    # sign rule: first non-negligible component positive
    first = np.argmax(np.abs(n) > 1e-12, axis=1)
    n = np.where((n[np.arange(len(n)), first] < 0)[:, None], -n, n)
    s = np.log(np.maximum(w, EIG_CLAMP))
    r = rotmats_to_quats(Q)
    cov = np.einsum("mab,mb,mcb->mac", Q, np.exp(s), Q) + lam * np.einsum("ma,mb->mab", n, n)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    rgb = np.zeros((len(keep), 3))
    if colors is not None:
        col = np.asarray(colors, dtype=float).reshape(len(N), -1, 3)[keep]
        m = np.ones(col.shape[:2]) if color_mask is None else np.asarray(color_mask, float).reshape(len(N), -1)[keep]
        cnt = m.sum(axis=1)
        rgb = np.einsum("mk,mka->ma", m, col) / np.maximum(cnt, 1)[:, None]
    splats = SplatSet(mu=C, cov=cov, alpha=np.ones(len(keep)), rgb=rgb, feature=np.zeros((len(keep), 0)),
                      r=r, s=s, n=n, lam=np.full(len(keep), float(lam)))
    return splats, keep


@dataclass
class SplatSet:
    """Struct-of-arrays view of many splats; what the registration stages consume."""

    mu: np.ndarray
    cov: np.ndarray
    alpha: np.ndarray
    rgb: np.ndarray
    feature: np.ndarray
    r: np.ndarray | None = None
    s: np.ndarray | None = None
    n: np.ndarray | None = None
    lam: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1, 3)
        k = len(self.mu)
        self.cov = np.asarray(self.cov, dtype=float).reshape(k, 3, 3)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(k)
        self.rgb = np.asarray(self.rgb, dtype=float).reshape(k, 3)
        f = np.asarray(self.feature, dtype=float)
        self.feature = f.reshape(k, f.size // k if k else (f.shape[-1] if f.ndim == 2 else 0))

    def __len__(self) -> int:
        return len(self.mu)

    @classmethod
    def from_splats(cls, splats: list[GaussianSplat]) -> "SplatSet":
        if not splats:
            return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 0)))
        return cls(
            mu=np.stack([g.mu for g in splats]),
            cov=np.stack([g.cov for g in splats]),
            alpha=np.array([g.alpha for g in splats]),
            rgb=np.stack([g.rgb for g in splats]),
            feature=np.stack([g.feature for g in splats]),
            r=np.stack([g.r for g in splats]),
            s=np.stack([g.s for g in splats]),
            n=np.stack([g.n for g in splats]),
            lam=np.array([g.lam for g in splats]),
        )

    def __getitem__(self, i: int) -> GaussianSplat:
        if self.r is None:
            raise TypeError("splat parameters (r, s, n, lam) were not retained")
        return GaussianSplat(mu=self.mu[i], r=self.r[i], s=self.s[i], n=self.n[i], lam=float(self.lam[i]),
                             alpha=float(self.alpha[i]), feature=self.feature[i], rgb=self.rgb[i],
                             cov=self.cov[i].copy())

    def subset(self, idx) -> "SplatSet":
        pick = (lambda a: None if a is None else a[idx])
        return SplatSet(self.mu[idx], self.cov[idx], self.alpha[idx], self.rgb[idx], self.feature[idx],
                        pick(self.r), pick(self.s), pick(self.n), pick(self.lam))

    def transformed(self, T: RigidTransform) -> "SplatSet":
        """Means map to ``R mu + t``; covariances to ``R cov R^T``; normals co-rotate."""
        R = T.R
        r = None
        if self.r is not None:
            r = rotmats_to_quats(R @ quats_to_rotmats(self.r)) if len(self) else self.r
        return SplatSet(
            mu=T.apply(self.mu),
            cov=np.einsum("ab,nbc,dc->nad", R, self.cov, R),
            alpha=self.alpha, rgb=self.rgb, feature=self.feature,
            r=r, s=self.s, n=None if self.n is None else self.n @ R.T, lam=self.lam,
        )

    def scaled(self, factor: float) -> "SplatSet":
        """Uniform change of length unit: means scale by ``factor``, covariances by ``factor**2``."""
        return SplatSet(self.mu * factor, self.cov * factor**2, self.alpha, self.rgb, self.feature,
                        self.r, None if self.s is None else self.s + 2 * np.log(factor), self.n,
                        None if self.lam is None else self.lam * factor**2)


def write_splats_jsonl(splats: SplatSet, path) -> None:
    with open(path, "w") as fh:
        for i in range(len(splats)):
            g = splats[i]
            fh.write(json.dumps({
                "mu": g.mu.tolist(), "r": g.r.tolist(), "s": g.s.tolist(), "n": g.n.tolist(),
                "lam": g.lam, "alpha": g.alpha, "feature": g.feature.tolist(), "rgb": g.rgb.tolist(),
            }) + "\n")


def read_splats_jsonl(path) -> SplatSet:
    splats = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                splats.append(GaussianSplat(mu=d["mu"], r=d["r"], s=d["s"], n=d["n"], lam=d["lam"],
                                            alpha=d.get("alpha", 1.0), feature=d.get("feature", []),
                                            rgb=d.get("rgb", [0, 0, 0])))
    return SplatSet.from_splats(splats)


@dataclass
class SplatFeature:
    vector: np.ndarray
    k_used: int
    short: bool  # fewer than k neighbors were available


def splat_concat(g: GaussianSplat) -> np.ndarray:
    return np.concatenate([g.mu, g.cov.reshape(-1), [g.alpha], g.feature])


def splat_feature(splat: GaussianSplat, neighbors: list[GaussianSplat], k: int) -> SplatFeature:
    """Mean-pool ``[mu, vec(cov), alpha, feature]`` over the k neighbors nearest to ``splat.mu``."""
    if not TOPK_RANGE[0] <= k <= TOPK_RANGE[1]:
        raise ValueError(f"k must lie in [{TOPK_RANGE[0]}, {TOPK_RANGE[1]}]")
    if not neighbors:
        raise ValueError("no neighbor splats")
    mus = np.stack([g.mu for g in neighbors])
    dist = np.linalg.norm(mus - splat.mu, axis=1)
    order = np.lexsort((np.arange(len(neighbors)), dist))[:k]
    rows = np.stack([splat_concat(neighbors[i]) for i in order])
    return SplatFeature(rows.mean(axis=0), len(order), len(order) < k)


@dataclass
class LowRankProjector:
    """Rank-r subspace from a truncated SVD: ``B`` is d x r, ``C`` is r x d."""

    B: np.ndarray
    C: np.ndarray
    singular_values: np.ndarray
    rank: int

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.B

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) @ self.C

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.reconstruct(self.project(x))

    @property
    def expected_error(self) -> float:
        """Eckart-Young optimum: sqrt of the discarded squared singular values."""
        return float(np.sqrt(np.sum(self.singular_values[self.rank:] ** 2)))


def fit_low_rank(features: np.ndarray, rank: int) -> LowRankProjector:
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    if rank < 1 or rank > min(X.shape):
        raise ValueError(f"rank must lie in [1, {min(X.shape)}], got {rank}")
    _, sv, Vt = np.linalg.svd(X, full_matrices=False)
    V = Vt[:rank].T
    return LowRankProjector(B=V, C=V.T, singular_values=sv, rank=rank)
