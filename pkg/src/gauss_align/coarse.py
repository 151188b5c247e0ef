"""Gaussian superpoint alignment: soft correspondences and weighted SVD pose solves."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import RigidTransform, rotation_angle, se3_exp
from .splats import GaussianSplat, SplatSet

LAMBDA_D_RANGE = (0.05, 0.2)
GAMMA_RANGE = (1.0, 3.0)
COV_REG = 1e-8


@dataclass
class CoarseConfig:
    lambda_d: float = 0.1
    gamma: float = 2.0
    max_iters: int = 50
    tol_rot: float = 1e-6
    tol_trans: float = 1e-6
    # extra term color_weight * |f_i - f_j|^2 on splat features; 0 = purely geometric
    color_weight: float = 0.0
    # drop source splats with no target mean within this radius (per iteration); None keeps all
    inlier_radius: float | None = None
    # with inlier_radius: also require the nearest target's nearest source to be the row itself
    mutual: bool = False
    # softmax over each row's nearest targets only (sparse A); None = all targets
    neighbors: int | None = None
    # Newton refinement of each weighted SVD solve on the exact Mahalanobis objective
    polish: bool = True
    # restart the refinement from several rotations (global minimum of each solve)
    multistart: bool = True

    def __post_init__(self):
        if not LAMBDA_D_RANGE[0] <= self.lambda_d <= LAMBDA_D_RANGE[1]:
            raise ValueError(f"lambda_d must lie in [{LAMBDA_D_RANGE[0]}, {LAMBDA_D_RANGE[1]}], got {self.lambda_d}")
        if not GAMMA_RANGE[0] <= self.gamma <= GAMMA_RANGE[1]:
            raise ValueError(f"gamma must lie in [{GAMMA_RANGE[0]}, {GAMMA_RANGE[1]}], got {self.gamma}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.color_weight < 0:
            raise ValueError("color_weight must be non-negative")


def generalized_distance(gi: GaussianSplat, gj: GaussianSplat, lambda_d: float) -> float:
    """``|mu_i - mu_j|^2 + lambda_d * |cov_i - cov_j|_F``."""
    return float(np.sum((gi.mu - gj.mu) ** 2) + lambda_d * np.linalg.norm(gi.cov - gj.cov))


def distance_matrix(source: SplatSet, target: SplatSet, lambda_d: float, color_weight: float = 0.0) -> np.ndarray:
    d = np.sum((source.mu[:, None, :] - target.mu[None, :, :]) ** 2, axis=2)
    cs = source.cov.reshape(-1, 9)
    ct = target.cov.reshape(-1, 9)
    gap = np.sum(cs**2, 1)[:, None] + np.sum(ct**2, 1)[None, :] - 2 * cs @ ct.T
    d += lambda_d * np.sqrt(np.maximum(gap, 0.0))
    if color_weight > 0:
        fs, ft = source.feature, target.feature
        fgap = np.sum(fs**2, 1)[:, None] + np.sum(ft**2, 1)[None, :] - 2 * fs @ ft.T
        d += color_weight * np.maximum(fgap, 0.0)
    return d


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def correspondence_matrix(source: SplatSet, target: SplatSet, cfg: CoarseConfig) -> np.ndarray:
    """Row-stochastic ``A_ij = softmax_j(-gamma d_ij)``."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("empty splat set")
    return softmax_rows(-cfg.gamma * distance_matrix(source, target, cfg.lambda_d, cfg.color_weight))


def precisions(cov: np.ndarray) -> np.ndarray:
    """Inverse covariances; singular ones get ``+1e-8 I`` with a warning."""
    cov = np.asarray(cov, dtype=float).reshape(-1, 3, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(cov) if len(cov) else np.zeros(0)
    bad = ~(cond <= 1e14)
    if bad.any():
        warnings.warn("singular target covariance regularized", RuntimeWarning, stacklevel=2)
        cov = cov.copy()
        cov[bad] += COV_REG * np.eye(3)
    return np.linalg.inv(cov)


@dataclass
class MahalanobisObjective:
    """``J(R, t) = sum_ij A_ij |R mu_i + t - mu_j|^2_{P_j}`` reduced to per-source terms.

    With ``M_i = sum_j A_ij P_j`` and ``m_i = sum_j A_ij P_j mu_j`` the objective
    is ``sum_i q_i^T M_i q_i - 2 q_i^T m_i + c`` where ``q_i = R mu_i + t``.
    """

    mu_s: np.ndarray
    M: np.ndarray
    m: np.ndarray
    c: float
    _reduced: tuple | None = field(default=None, init=False, repr=False)

    @classmethod
    def build(cls, mu_s, mu_t, P, A) -> "MahalanobisObjective":
        """``A`` may be a dense array or a scipy sparse array."""
        M = np.asarray(A @ P.reshape(len(P), 9)).reshape(-1, 3, 3)
        Pmu = np.einsum("jab,jb->ja", P, mu_t)
        m = np.asarray(A @ Pmu)
        c = float(np.sum(A @ np.einsum("ja,ja->j", mu_t, Pmu)))
        return cls(np.asarray(mu_s, float), M, m, c)

    def __call__(self, T: RigidTransform) -> float:
        q = T.apply(self.mu_s)
        val = np.einsum("ia,iab,ib->", q, self.M, q) - 2 * np.einsum("ia,ia->", q, self.m) + self.c
        return float(max(val, 0.0))

    def gradient(self, T: RigidTransform) -> np.ndarray:
        """Derivative w.r.t. a left-perturbation twist ``exp(xi) T`` at xi = 0."""
        q = T.apply(self.mu_s)
        g = 2 * (np.einsum("iab,ib->ia", self.M, q) - self.m)
        return np.concatenate([np.sum(np.cross(q, g), axis=0), g.sum(axis=0)])

    def hessian(self, T: RigidTransform) -> np.ndarray:
        """Exact second derivative w.r.t. the left-perturbation twist at xi = 0."""
        q = T.apply(self.mu_s)
        g = 2 * (np.einsum("iab,ib->ia", self.M, q) - self.m)
        # first-order part: D_i = [-[q_i]x, I], 2 sum D_i^T M_i D_i
        Qx = _skew_stack(q)
        H = np.zeros((6, 6))
        H[:3, :3] = 2 * np.einsum("iba,ibc,icd->ad", Qx, self.M, Qx)
        H[:3, 3:] = -2 * np.einsum("iba,ibc->ac", Qx, self.M)
        H[3:, 3:] = 2 * self.M.sum(axis=0)
        # curvature of exp itself: p + w x p + v + (w x (w x p + v)) / 2
        gq = g.T @ q
        H[:3, :3] += 0.5 * (gq + gq.T) - np.trace(gq) * np.eye(3)
        H[:3, 3:] -= 0.5 * _skew_stack(g.sum(axis=0)[None])[0]
        H[3:, :3] = H[:3, 3:].T
        return H

    def refine(self, T: RigidTransform, iters: int = 50, tol: float = 1e-12) -> RigidTransform:
        """Newton descent with the exact Hessian; eigenvalues are made positive so every step descends."""
        f = self(T)
        for _ in range(iters):
            g = self.gradient(T)
            w, V = np.linalg.eigh(self.hessian(T))
            w = np.maximum(np.abs(w), 1e-9 * max(np.abs(w).max(), 1e-300))
            step = -V @ ((V.T @ g) / w)
            eta = 1.0
            while eta > 1e-8:
                cand = se3_exp(eta * step) @ T
                fc = self(cand)
                if fc <= f:
                    break
                eta *= 0.5
            else:
                break
            improved = f - fc
            T, f = cand, fc
            if np.linalg.norm(eta * step) < tol or improved <= 1e-16 * max(f, 1.0):
                break
        return T

    def reduced_form(self):
        """Eliminate t: ``J(R, t*(R)) = r^T Q r - 2 h^T r + c0`` with ``r = R.ravel()``.

        Also returns ``(S, G, g)`` so that ``t*(R) = S^-1 (g - G r)``.
        """
        if self._reduced is not None:
            return self._reduced
        mu, M, m = self.mu_s, self.M, self.m
        Qrr = np.einsum("iac,ib,id->abcd", M, mu, mu).reshape(9, 9)
        G = np.einsum("iec,id->ecd", M, mu).reshape(3, 9)
        lin = np.einsum("ia,ib->ab", m, mu).reshape(9)
        S = M.sum(axis=0)
        g = m.sum(axis=0)
        SiG = np.linalg.solve(S, G)
        Sig = np.linalg.solve(S, g)
        Q = Qrr - G.T @ SiG
        self._reduced = 0.5 * (Q + Q.T), lin - G.T @ Sig, self.c - g @ Sig, (S, G, g)
        return self._reduced

    def scan(self, R: np.ndarray) -> np.ndarray:
        """Objective with the optimal translation for a batch of rotations ``(n, 3, 3)``."""
        Q, h, c0, _ = self.reduced_form()
        r = np.asarray(R, dtype=float).reshape(-1, 9)
        return np.einsum("na,ab,nb->n", r, Q, r) - 2 * r @ h + c0

    def best_translation(self, R: np.ndarray) -> np.ndarray:
        _, _, _, (S, G, g) = self.reduced_form()
        return np.linalg.solve(S, g - G @ np.asarray(R, dtype=float).reshape(9))


def _skew_stack(v: np.ndarray) -> np.ndarray:
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1], S[:, 0, 2], S[:, 1, 2] = -v[:, 2], v[:, 1], -v[:, 0]
    S[:, 1, 0], S[:, 2, 0], S[:, 2, 1] = v[:, 2], -v[:, 1], v[:, 0]
    return S


def kabsch_rotation(H: np.ndarray, guard: bool = True) -> np.ndarray:
    """``R = V U^T`` from ``H = U S V^T``; with ``guard`` the last column of V flips on reflection."""
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    R = V @ U.T
    if guard and np.linalg.det(R) < 0:
        V = V.copy()
        V[:, -1] *= -1
        R = V @ U.T
    return R


def _row_col_sums(A):
    return np.asarray(A.sum(axis=1)).reshape(-1), np.asarray(A.sum(axis=0)).reshape(-1)


def weighted_centroids(mu_s, mu_t, A):
    rows, cols = _row_col_sums(A)
    W = rows.sum()
    if not W > 0:
        raise ValueError("vacuous correspondences")
    return (rows @ mu_s) / W, (cols @ mu_t) / W


_FLIPS = (np.diag([1.0, 1, 1]), np.diag([1.0, -1, -1]), np.diag([-1.0, 1, -1]), np.diag([-1.0, -1, 1]))


def _svd_candidates(H: np.ndarray) -> list[np.ndarray]:
    """The guarded Kabsch rotation and its three half-turn flips about the principal axes of ``H``."""
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    out = []
    for D in _FLIPS:
        R = V @ D @ U.T
        if np.linalg.det(R) < 0:
            D = D.copy()
            D[2, 2] *= -1
            R = V @ D @ U.T
        out.append(R)
    return out


def _rotation_lattice(step: float) -> np.ndarray:
    ax = np.arange(-np.pi, np.pi + step / 2, step)
    W = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    W = W[np.linalg.norm(W, axis=1) <= np.pi]
    return Rotation.from_rotvec(W).as_matrix()


# about 17 degree spacing; the reduced objective is cheap enough to scan it exhaustively
_LATTICE = _rotation_lattice(0.3)
LATTICE_STARTS = 6
_LATTICE_SEPARATION = np.radians(30.0)


def _lattice_starts(obj: "MahalanobisObjective", k: int) -> list[np.ndarray]:
    """Best lattice rotations, pairwise at least 30 degrees apart."""
    vals = obj.scan(_LATTICE)
    picked: list[np.ndarray] = []
    for i in np.argsort(vals):
        R = _LATTICE[i]
        if all(rotation_angle(R @ P.T) > _LATTICE_SEPARATION for P in picked):
            picked.append(R)
            if len(picked) == k:
                break
    return picked


def weighted_svd_align(source: SplatSet, target: SplatSet, A: np.ndarray, polish: bool = True,
                       P: np.ndarray | None = None, multistart: bool = True) -> RigidTransform:
    """Minimize the Mahalanobis-weighted alignment objective for fixed ``A``.

    Closed-form SVD step on ``H = sum_ij A_ij P_j (mu_i - c_s)(mu_j - c_t)^T``
    with a reflection guard, then (``polish``) Newton descent on the exact
    objective, which matters only when the target covariances are anisotropic.
    Anisotropic precisions make the objective multimodal in R, so with
    ``multistart`` the polish also runs from the unweighted Kabsch solution,
    the half-turn flips of both, and the best points of a rotation lattice
    scanned with the translation eliminated; the lowest objective wins.
    """
    if not sparse.issparse(A):
        A = np.asarray(A, dtype=float)
    if A.shape != (len(source), len(target)):
        raise ValueError("correspondence matrix shape does not match the splat sets")
    if not np.any((A.data if sparse.issparse(A) else A) > 0):
        raise ValueError("vacuous correspondences")
    if P is None:
        P = precisions(target.cov)
    c_s, c_t = weighted_centroids(source.mu, target.mu, A)
    a = source.mu - c_s
    b = target.mu - c_t
    s = np.asarray(A.T @ a)  # per target: sum_i A_ij a_i
    H = np.einsum("jab,jb,jc->ac", P, s, b)
    R = kabsch_rotation(H)
    T = RigidTransform(R, c_t - R @ c_s)
    if not polish:
        return T
    obj = MahalanobisObjective.build(source.mu, target.mu, P, A)
    starts = [R]
    # isotropic precisions give a weighted Procrustes problem with a unique minimum
    isotropic = np.allclose(P, np.einsum("jaa->j", P)[:, None, None] / 3 * np.eye(3), rtol=0, atol=1e-12 * np.abs(P).max())
    if multistart and not isotropic:
        starts = _svd_candidates(H) + _svd_candidates(s.T @ b) + _lattice_starts(obj, LATTICE_STARTS)
    best, best_f = None, np.inf
    for R0 in starts:
        cand = obj.refine(RigidTransform(R0, obj.best_translation(R0)))
        f = obj(cand)
        if f < best_f:
            best, best_f = cand, f
    return best


def alignment_objective(source: SplatSet, target: SplatSet, A: np.ndarray, T: RigidTransform,
                        P: np.ndarray | None = None) -> float:
    if P is None:
        P = precisions(target.cov)
    return MahalanobisObjective.build(source.mu, target.mu, P, A)(T)


@dataclass
class CoarseResult:
    transform: RigidTransform
    A_final: np.ndarray
    active: np.ndarray  # source rows of A_final
    iterations: int
    converged: bool
    objective_trace: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "pose": self.transform.as_matrix().reshape(-1).tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "objective_trace": [float(v) for v in self.objective_trace],
        })


def _active_rows(moved_mu: np.ndarray, target_tree: cKDTree, cfg: CoarseConfig) -> np.ndarray | None:
    """Rows kept by the inlier-radius (and mutual nearest neighbor) test; None if too few survive."""
    dist, nn = target_tree.query(moved_mu)
    ok = dist <= cfg.inlier_radius
    if cfg.mutual:
        _, back = cKDTree(moved_mu).query(target_tree.data[nn])
        ok &= back == np.arange(len(nn))
    keep = np.flatnonzero(ok)
    return keep if len(keep) >= 3 else None


def sparse_correspondences(source: SplatSet, target: SplatSet, cfg: CoarseConfig,
                           tree: cKDTree | None = None) -> sparse.csr_array:
    """Row softmax of ``-gamma d`` restricted to each row's ``cfg.neighbors`` nearest targets."""
    k = min(cfg.neighbors, len(target))
    tree = tree or cKDTree(target.mu)
    dist, idx = tree.query(source.mu, k=k)
    dist, idx = dist.reshape(len(source), k), idx.reshape(len(source), k)
    d = dist**2 + cfg.lambda_d * np.linalg.norm((source.cov[:, None] - target.cov[idx]).reshape(len(source), k, 9),
                                                 axis=2)
    if cfg.color_weight > 0:
        d += cfg.color_weight * np.sum((source.feature[:, None] - target.feature[idx]) ** 2, axis=2)
    w = softmax_rows(-cfg.gamma * d)
    indptr = np.arange(0, len(source) * k + 1, k)
    return sparse.csr_array((w.reshape(-1), idx.reshape(-1), indptr), shape=(len(source), len(target)))


def coarse_register(source: SplatSet, target: SplatSet, cfg: CoarseConfig | None = None,
                    init: RigidTransform | None = None) -> CoarseResult:
    """Alternate soft correspondences and weighted SVD solves until the increment is below tolerance.

    The returned transform maps source coordinates into the target frame.
    """
    cfg = cfg or CoarseConfig()
    if len(source) == 0 or len(target) == 0:
        raise ValueError("empty splat set")
    P = precisions(target.cov)
    tree = cKDTree(target.mu)
    pose = init or RigidTransform.identity()
    trace = []
    converged = False
    A = None
    active = np.arange(len(source))
    it = 0
    for it in range(1, cfg.max_iters + 1):
        R = pose.R
        moved = SplatSet(pose.apply(source.mu), np.einsum("ab,nbc,dc->nad", R, source.cov, R),
                         source.alpha, source.rgb, source.feature)
        if cfg.inlier_radius is not None:
            keep = _active_rows(moved.mu, tree, cfg)
            if keep is not None:
                active = keep
        sub = moved.subset(active)
        if cfg.neighbors:
            A = sparse_correspondences(sub, target, cfg, tree)
        else:
            A = softmax_rows(-cfg.gamma * distance_matrix(sub, target, cfg.lambda_d, cfg.color_weight))
        step = weighted_svd_align(sub, target, A, polish=cfg.polish, P=P, multistart=cfg.multistart)
        pose = step @ pose
        trace.append(alignment_objective(sub, target, A, step, P=P))
        if rotation_angle(step.R) < cfg.tol_rot and np.linalg.norm(step.t) < cfg.tol_trans:
            converged = True
            break
    return CoarseResult(pose, A, active, it, converged, trace)
