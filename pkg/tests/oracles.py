"""Independent brute-force oracles shared by the unit and acceptance tests."""

import math

import numpy as np
from scipy.spatial.transform import Rotation


def mahalanobis_objective(R, t, mu_s, mu_t, P, A):
    """Direct double sum over all pairs; R may be a (..., 3, 3) batch with t (..., 3)."""
    q = np.einsum("...ab,ib->...ia", R, mu_s) + np.asarray(t)[..., None, :]
    r = q[..., :, None, :] - mu_t[None, :, :]  # ..., i, j, 3
    return np.einsum("ij,...ija,jab,...ijb->...", A, r, P, r)


def best_translation(R, mu_s, mu_t, P, A):
    """The objective is quadratic in t for fixed R; solve the normal equations per rotation."""
    M = np.einsum("ij,jab->iab", A, P)
    m = np.einsum("ij,jab,jb->ia", A, P, mu_t)
    rhs = m.sum(0) - np.einsum("iab,...bc,ic->...a", M, R, mu_s)
    return np.linalg.solve(M.sum(0), rhs[..., None])[..., 0]


def rotvec_grid(step, center=None, half_width=None):
    """Rotation vectors on a cubic lattice: the whole ball |w| <= pi, or a cube around ``center``."""
    if center is None:
        ax = np.arange(-np.pi, np.pi + step / 2, step)
        W = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
        return W[np.linalg.norm(W, axis=1) <= np.pi]
    ax = np.arange(-half_width, half_width + step / 2, step)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3) + center


def grid_search(mu_s, mu_t, P, A, coarse_deg=5.0, fine_deg=1.0, n_refine=24, chunk=20000):
    """Minimum of the alignment objective over a rotation grid with the exact best t per rotation.

    A full lattice at ``coarse_deg`` covers SO(3); the ``n_refine`` best coarse
    cells are then searched on a ``fine_deg`` lattice spanning one coarse cell.
    Using the exact t instead of a 1 cm lattice can only lower the grid value.
    """
    def evaluate(W):
        out = np.empty(len(W))
        for s in range(0, len(W), chunk):
            R = Rotation.from_rotvec(W[s:s + chunk]).as_matrix()
            t = best_translation(R, mu_s, mu_t, P, A)
            out[s:s + chunk] = mahalanobis_objective(R, t, mu_s, mu_t, P, A)
        return out

    step = np.radians(coarse_deg)
    W = rotvec_grid(step)
    J = evaluate(W)
    best = np.inf, None
    for k in np.argsort(J)[:n_refine]:
        Wf = rotvec_grid(np.radians(fine_deg), W[k], step)
        Jf = evaluate(Wf)
        i = int(np.argmin(Jf))
        if Jf[i] < best[0]:
            best = Jf[i], Wf[i]
    return best


def rotation_error_deg(R_est, R_gt):
    c = (np.trace(R_est.T @ R_gt) - 1) / 2
    return float(np.degrees(np.arccos(np.clip(c, -1, 1))))


# straight-line metric re-implementations: plain Python loops over lists, no vectorization

def _apply(T, p):
    return [sum(T.R[a][b] * p[b] for b in range(3)) + T.t[a] for a in range(3)]


def _dist(p, q):
    return sum((p[a] - q[a]) ** 2 for a in range(3)) ** 0.5


def brute_inlier_ratio(corrs, P, Q, T, delta):
    good = 0
    for i, j in corrs:
        good += _dist(_apply(T, P[i]), Q[j]) < delta
    return good / len(corrs)


def brute_fmr(irs, eta):
    return sum(1 for v in irs if v >= eta) / len(irs)


def brute_rmse(corrs, P, Q, T):
    s = 0.0
    for i, j in corrs:
        s += _dist(_apply(T, P[i]), Q[j]) ** 2
    return (s / len(corrs)) ** 0.5


def brute_pir(C, patches_p, patches_q, T, zeta):
    hits = 0
    for a, b in C:
        hits += any(_dist(_apply(T, p), q) < zeta for p in patches_p[a] for q in patches_q[b])
    return hits / len(C)


def brute_pose_errors(T_est, T_gt):
    # D = R_est^T R_gt entry by entry; angle from its trace (cosine) and skew part (sine)
    D = [[sum(T_est.R[k][a] * T_gt.R[k][b] for k in range(3)) for b in range(3)] for a in range(3)]
    c = min(1.0, max(-1.0, (D[0][0] + D[1][1] + D[2][2] - 1) / 2))
    s = 0.5 * ((D[2][1] - D[1][2]) ** 2 + (D[0][2] - D[2][0]) ** 2 + (D[1][0] - D[0][1]) ** 2) ** 0.5
    return math.degrees(math.atan2(s, c)), _dist(T_est.t, T_gt.t)


def brute_rr_outdoor(errors, rre_max, rte_max):
    return sum(1 for r, t in errors if r < rre_max and t < rte_max) / len(errors)


def metric_fixture(seed):
    """Random clouds, correspondences with mixed residual scales, patches and a nearby estimate."""
    from gauss_align.geometry import RigidTransform, se3_exp

    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 101))
    P = rng.uniform(-2, 2, (n, 3))
    T_gt = RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-3, 3, 3))
    Q = T_gt.apply(P) + rng.normal(size=(n, 3)) * rng.choice([0.01, 0.05, 0.3], (n, 1))
    # true pairs in shuffled order, a fifth of them rewired to random sources
    corrs = np.repeat(rng.permutation(n)[:, None], 2, axis=1)
    flip = rng.random(n) < 0.2
    corrs[flip, 0] = rng.integers(0, n, flip.sum())
    T_est = se3_exp(rng.normal(size=6) * rng.choice([1e-3, 0.05, 0.5])) @ T_gt
    k = int(rng.integers(1, 8))
    patches_p = [P[rng.choice(n, rng.integers(1, min(n, 6) + 1), replace=False)] for _ in range(k)]
    patches_q = [Q[rng.choice(n, rng.integers(1, min(n, 6) + 1), replace=False)] for _ in range(k)]
    C = np.stack([rng.integers(0, k, k), rng.integers(0, k, k)], 1)
    return dict(P=P, Q=Q, corrs=corrs, T_gt=T_gt, T_est=T_est, patches_p=patches_p, patches_q=patches_q, C=C)
