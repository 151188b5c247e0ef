"""End-to-end registration: superpoint splats, a global pose search, coarse then fine alignment.

All registration work happens in a normalized length unit of one voxel, so
that the distance-based hyperparameters (gamma, lambda, gamma_d) have the same
meaning at every scene scale. Translations are scaled back to meters at the end.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .coarse import CoarseConfig, CoarseResult, coarse_register
from .color import ColorEncoderParams, ColorSpace, FusionGate, convert_color, encode_color, fuse_features
from .fine import FineConfig, FineResult, GeometricLoss, NoPhotometricOverlap, default_cameras, fine_register
from .geometry import ColoredPointCloud, RigidTransform, voxel_downsample
from .splats import SplatSet, build_splats, fit_low_rank

# (low, high) for every range-checked parameter
RANGES = {
    "lam": (0.01, 0.1),
    "top_k": (2, 5),
    "lambda_d": (0.05, 0.2),
    "gamma": (1.0, 3.0),
    "gamma_d": (1.0, 3.0),
    "lambda_p": (0.1, 1.0),
    "sigma_gs": (0.01, 0.1),
    "lambda_g": (0.01, 1.0),
}


@dataclass
class RunConfig:
    voxel_size: float = 0.25  # m; level-1 superpoint spacing and its length unit
    refine_voxel_size: float = 0.1  # m; level-2 spacing; 0 disables the level-2 pass
    k_neighbors: int = 16  # dense points per splat neighborhood
    lam: float = 0.01  # normal strength, in squared level units
    top_k: int = 3  # descriptor partners per source superpoint
    color_space: str = "hsv"
    use_color: bool = True
    color_dim: int = 8
    fusion_omega: float = 0.0  # gate on the color block below the top level
    descriptor_rank: int = 16
    # embedding hyperparameters (validated here, consumed by the embeddings module)
    sigma_gs: float = 0.05
    sigma_d: float = 1.0
    sigma_a: float = 0.25
    lambda_g: float = 0.1
    # global pose search
    shell_radii_m: tuple = (0.375, 0.75, 1.25)  # descriptor context shells
    ransac_iters: int = 8000
    ransac_keep: int = 32  # candidates kept per batch of 1000 samples
    n_hypotheses: int = 4
    color_tolerance: float = 0.1  # RGB distance scale in the hypothesis score
    # coarse stage (both levels)
    lambda_d: float = 0.1
    gamma: float = 3.0
    coarse_iters: int = 30
    tol_rot: float = 1e-6
    tol_trans: float = 1e-6
    color_weight: float = 0.0  # level-1 feature term in the generalized distance
    inlier_radius: float = 1.5  # level units
    neighbors: int = 8  # soft assignment over this many nearest targets
    # fine stage
    gamma_d: float = 2.0
    lambda_p: float = 0.5
    fine_steps: int = 20
    fine_eta: float = 0.1
    fine_beta: float = 0.5
    fine_ftol: float = 1e-4
    fine_backtracks: int = 8
    fine_max_twist: float = 0.05
    n_cameras: int = 4
    camera_size: int = 64
    camera_elevation_deg: float = 30.0
    seed: int = 0

    def __post_init__(self):
        for name, (lo, hi) in RANGES.items():
            v = getattr(self, name)
            if name == "lambda_g" and v == 0.0:
                continue
            if not lo <= v <= hi:
                raise ValueError(f"{name} = {v} is outside the permitted interval [{lo}, {hi}]")
        if not self.voxel_size > 0 or self.refine_voxel_size < 0:
            raise ValueError("voxel_size must be positive and refine_voxel_size non-negative")
        if self.k_neighbors < 3:
            raise ValueError(f"k_neighbors = {self.k_neighbors} must be at least 3")
        ColorSpace(self.color_space)
        self.shell_radii_m = tuple(float(r) for r in self.shell_radii_m)
        if not self.shell_radii_m or any(r <= 0 for r in self.shell_radii_m) or \
                list(self.shell_radii_m) != sorted(self.shell_radii_m):
            raise ValueError("shell_radii_m must be positive and increasing")
        if self.ransac_iters < 1 or self.n_hypotheses < 1 or self.color_tolerance <= 0:
            raise ValueError("ransac_iters, n_hypotheses and color_tolerance must be positive")
        if self.sigma_d <= 0 or self.sigma_a <= 0:
            raise ValueError("sigma_d and sigma_a must be positive")
        if self.color_weight < 0:
            raise ValueError("color_weight must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def coarse_config(self, level: int = 1) -> CoarseConfig:
        return CoarseConfig(lambda_d=self.lambda_d, gamma=self.gamma, max_iters=self.coarse_iters,
                            tol_rot=self.tol_rot, tol_trans=self.tol_trans,
                            color_weight=self.color_weight if (self.use_color and level == 1) else 0.0,
                            inlier_radius=self.inlier_radius, mutual=True, neighbors=self.neighbors,
                            multistart=False)


@dataclass
class EncodedCloud:
    splats: SplatSet  # in level units
    descriptor: np.ndarray  # rigid-invariant per-splat descriptor
    scale: float  # meters per level unit


N_LEVELS = 2


def encode_cloud(cloud: ColoredPointCloud, cfg: RunConfig, params: ColorEncoderParams | None = None,
                 level: int = 1) -> EncodedCloud:
    """Voxel superpoints -> Gaussian splats with fused features, in units of the level's voxel.

    Level 1 is the top (coarsest) level, where color and geometry are concatenated
    ungated; level 2 gates the color block by ``sigmoid(fusion_omega)``.
    """
    if len(cloud) < 3:
        raise ValueError("point cloud has fewer than 3 points")
    scale = cfg.voxel_size if level == 1 else cfg.refine_voxel_size
    pts = cloud.positions / scale
    centers = voxel_downsample(ColoredPointCloud(pts), 1.0).positions
    k = min(cfg.k_neighbors, len(pts))
    _, nbr = cKDTree(pts).query(centers, k=k)
    nbr = np.asarray(nbr).reshape(len(centers), k)
    S, _ = build_splats(centers, pts[nbr], cfg.lam, cloud.colors[nbr], cloud.color_mask[nbr])
    if len(S) < 3:
        raise ValueError("fewer than 3 valid superpoints")
    F_g = np.sort(S.s, axis=1)
    F_g = F_g - F_g[:, -1:]  # shape only: log eigenvalue ratios
    if cfg.use_color:
        params = params or ColorEncoderParams.from_seed(cfg.seed, d_out=cfg.color_dim)
        F_c = encode_color(convert_color(np.clip(S.rgb, 0.0, 1.0), cfg.color_space), params)
    else:
        F_c = np.zeros((len(S), cfg.color_dim))
    # the top level is the coarsest one
    S.feature = fuse_features(F_g, F_c, FusionGate(cfg.fusion_omega), N_LEVELS + 1 - level, N_LEVELS)
    # only the top level drives the global search
    desc = context_descriptor(S, S.feature, np.asarray(cfg.shell_radii_m) / scale, cfg.use_color) \
        if level == 1 else S.feature
    return EncodedCloud(S, desc, scale)


def context_descriptor(S: SplatSet, feature: np.ndarray, radii, use_color: bool = True) -> np.ndarray:
    """Rigid-invariant descriptor: own feature plus per-shell statistics of the neighborhood.

    For every shell ``radii[k-1] <= |mu_j - mu_i| < radii[k]`` it stores the mean
    color of the neighbors, the mean ``|cos|`` between the offset and the own
    normal, and the mean ``|n_i . n_j|``. Empty shells give zeros.
    """
    n = len(S)
    radii = np.asarray(radii, dtype=float)
    col = np.clip(S.rgb, 0.0, 1.0) if use_color else np.zeros((n, 3))
    D = cKDTree(S.mu).sparse_distance_matrix(cKDTree(S.mu), float(radii[-1]), output_type="coo_matrix")
    i, j, d = D.row, D.col, D.data
    ok = d > 0  # drops self pairs
    i, j, d = i[ok], j[ok], d[ok]
    shell = np.searchsorted(radii, d, side="right")
    keep = shell < len(radii)
    i, j, d, shell = i[keep], j[keep], d[keep], shell[keep]
    off = (S.mu[j] - S.mu[i]) / d[:, None]
    stats = np.concatenate([col[j], np.abs(np.sum(off * S.n[i], 1))[:, None],
                            np.abs(np.sum(S.n[i] * S.n[j], 1))[:, None]], axis=1)
    out = [feature, col]
    for k in range(len(radii)):
        m = shell == k
        cnt = np.bincount(i[m], minlength=n).astype(float)
        acc = np.stack([np.bincount(i[m], weights=stats[m, c], minlength=n) for c in range(stats.shape[1])], 1)
        out.append(acc / np.maximum(cnt, 1.0)[:, None])
    return np.concatenate(out, axis=1)


@dataclass
class Hypothesis:
    transform: RigidTransform
    votes: float  # inlier count of the descriptor correspondences


def descriptor_matches(ds: np.ndarray, dt: np.ndarray, k: int) -> np.ndarray:
    """``(m, 2)`` index pairs: every source row with its ``k`` nearest target rows."""
    k = min(k, len(dt))
    _, j = cKDTree(dt).query(ds, k=k)
    j = np.asarray(j).reshape(len(ds), k)
    return np.stack([np.repeat(np.arange(len(ds)), k), j.reshape(-1)], axis=1)


def _kabsch_batch(P: np.ndarray, Q: np.ndarray):
    """Least-squares rotations and translations for a batch of ``(b, m, 3)`` point sets."""
    cp, cq = P.mean(axis=1), Q.mean(axis=1)
    H = np.einsum("bmi,bmj->bij", P - cp[:, None], Q - cq[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("bij,bjk->bik", U, Vt)))
    Vt[:, 2] *= d[:, None]
    R = np.einsum("bij,bjk->bki", U, Vt)
    return R, cq - np.einsum("bij,bj->bi", R, cp)


def global_hypotheses(src: EncodedCloud, tgt: EncodedCloud, cfg: RunConfig,
                      rng: np.random.Generator | None = None) -> list[Hypothesis]:
    """RANSAC over descriptor correspondences.

    Triplets are drawn from the top-k matches, filtered by pairwise length
    consistency, and scored by the number of correspondences landing within
    ``inlier_radius`` level units. Returns hypotheses sorted by inlier count,
    each refit on its inliers.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    C = descriptor_matches(src.descriptor, tgt.descriptor, cfg.top_k)
    P, Q = src.splats.mu[C[:, 0]], tgt.splats.mu[C[:, 1]]
    tol = cfg.inlier_radius
    out = []
    batch = 1000
    for _ in range(max(1, cfg.ransac_iters // batch)):
        idx = rng.integers(0, len(C), size=(batch, 3))
        ps, qs = P[idx], Q[idx]
        ls = np.linalg.norm(ps - np.roll(ps, 1, axis=1), axis=2)
        lt = np.linalg.norm(qs - np.roll(qs, 1, axis=1), axis=2)
        good = np.all(np.abs(ls - lt) < tol, axis=1) & np.all(ls > 2 * tol, axis=1)
        if not good.any():
            continue
        R, t = _kabsch_batch(ps[good], qs[good])
        res = np.linalg.norm(np.einsum("bij,mj->bmi", R, P) + t[:, None] - Q[None], axis=2)
        count = np.sum(res < tol, axis=1)
        for b in np.argsort(-count)[:cfg.ransac_keep]:
            out.append((int(count[b]), R[b], t[b], res[b] < tol))
    hyps = []
    for cnt, R, t, inl in sorted(out, key=lambda h: -h[0]):
        if cnt >= 3:
            Rr, tr = _kabsch_batch(P[inl][None], Q[inl][None])
            R, t = Rr[0], tr[0]
        hyps.append(Hypothesis(RigidTransform(R, t), float(cnt)))
    return hyps


def _distinct(hyps: list[Hypothesis], n: int, min_rot_deg: float, min_trans: float) -> list[Hypothesis]:
    picked: list[Hypothesis] = []
    for h in hyps:
        if all(np.degrees(np.arccos(np.clip((np.trace(h.transform.R.T @ p.transform.R) - 1) / 2, -1, 1)))
               >= min_rot_deg or np.linalg.norm(h.transform.t - p.transform.t) >= min_trans for p in picked):
            picked.append(h)
        if len(picked) == n:
            break
    return picked


def alignment_score(src: EncodedCloud, tgt: EncodedCloud, T: RigidTransform, cfg: RunConfig,
                    radius: float = 0.75) -> float:
    """Source superpoints landing within ``radius`` of a target superpoint, discounted by color mismatch."""
    d, j = cKDTree(tgt.splats.mu).query(T.apply(src.splats.mu))
    close = d <= radius
    if not cfg.use_color:
        return float(np.sum(close))
    gap = np.sum((src.splats.rgb - tgt.splats.rgb[j]) ** 2, axis=1)
    return float(np.sum(close * np.exp(-gap / cfg.color_tolerance**2)))


@dataclass
class RegistrationResult:
    transform: RigidTransform  # meters, source -> target
    coarse: CoarseResult
    fine: FineResult | None
    timing: dict
    n_source_splats: int
    n_target_splats: int
    hypotheses: list = field(default_factory=list)  # (votes, score) per refined hypothesis

    def to_dict(self) -> dict:
        return {
            "pose": self.transform.as_matrix().reshape(-1).tolist(),
            "coarse": {"iterations": self.coarse.iterations, "converged": self.coarse.converged,
                       "objective_trace": [float(v) for v in self.coarse.objective_trace]},
            "fine": None if self.fine is None else {
                "steps": self.fine.steps, "converged": self.fine.converged,
                "loss_trace": [float(v) for v in self.fine.loss_trace]},
            "timing": self.timing,
            "splats": {"source": self.n_source_splats, "target": self.n_target_splats},
            "hypotheses": self.hypotheses,
        }


def fine_cameras(src: SplatSet, tgt: SplatSet, T: RigidTransform, cfg: RunConfig, radius: float = 1.5):
    """Default camera ring around the overlap: target splats near the moved source."""
    d, _ = cKDTree(src.transformed(T).mu).query(tgt.mu)
    ov = tgt.mu[d <= radius]
    if len(ov) < 3:
        ov = tgt.mu
    center = ov.mean(axis=0)
    r = float(np.max(np.linalg.norm(ov - center, axis=1)))
    return default_cameras(center, r, cfg.n_cameras, cfg.camera_size, cfg.camera_elevation_deg)


def _rescale(T: RigidTransform, factor: float) -> RigidTransform:
    return RigidTransform(T.R, T.t * factor)


def register_encoded(src: EncodedCloud, tgt: EncodedCloud, cfg: RunConfig, init: RigidTransform | None = None,
                     src2: EncodedCloud | None = None, tgt2: EncodedCloud | None = None):
    """Pose search and refinement on encoded clouds. Returns ``(pose_m, coarse, fine, info)``;
    the stage results are in the units of the level they ran on."""
    ccfg = cfg.coarse_config(1)
    if init is not None:
        starts = [Hypothesis(_rescale(init, 1.0 / src.scale), np.inf)]
    else:
        cands = global_hypotheses(src, tgt, cfg)
        # color-aware pre-screen with a loose radius, since the raw candidates are rough
        pre = [alignment_score(src, tgt, h.transform, cfg, radius=2 * cfg.inlier_radius) for h in cands]
        order = np.argsort(-np.asarray(pre), kind="stable")
        starts = _distinct([cands[i] for i in order], cfg.n_hypotheses, 10.0, 2.0)
    best, info = None, []
    for h in starts:
        res = coarse_register(src.splats, tgt.splats, ccfg, init=h.transform)
        score = alignment_score(src, tgt, res.transform, cfg)
        info.append({"votes": h.votes, "score": score})
        if best is None or score > best[0]:
            best = (score, res)
    coarse = best[1]
    pose_m = _rescale(coarse.transform, src.scale)
    lvl_src, lvl_tgt = src, tgt
    if src2 is not None and tgt2 is not None:
        coarse = coarse_register(src2.splats, tgt2.splats, cfg.coarse_config(2),
                                 init=_rescale(pose_m, 1.0 / src2.scale))
        pose_m = _rescale(coarse.transform, src2.scale)
        lvl_src, lvl_tgt = src2, tgt2
    fine = None
    if cfg.fine_steps > 0:
        pose = _rescale(pose_m, 1.0 / lvl_src.scale)
        fcfg = FineConfig(gamma_d=cfg.gamma_d, lambda_p=cfg.lambda_p, eta=cfg.fine_eta, max_steps=cfg.fine_steps,
                          beta=cfg.fine_beta, ftol=cfg.fine_ftol, max_backtracks=cfg.fine_backtracks,
                          max_twist=cfg.fine_max_twist,
                          cameras=fine_cameras(lvl_src.splats, lvl_tgt.splats, pose, cfg))
        geo = GeometricLoss(lvl_src.splats, lvl_tgt.splats, coarse.A_final, coarse.active)
        try:
            fine = fine_register(lvl_tgt.splats, lvl_src.splats, pose, fcfg, L_geo_fn=geo)
            pose_m = _rescale(fine.transform, lvl_src.scale)
        except NoPhotometricOverlap:
            fine = None
    return pose_m, coarse, fine, info


def register(source: ColoredPointCloud, target: ColoredPointCloud, cfg: RunConfig | None = None,
             init: RigidTransform | None = None) -> RegistrationResult:
    """Estimate the rigid transform mapping ``source`` onto ``target`` (meters)."""
    cfg = cfg or RunConfig()
    t0 = time.perf_counter()
    params = ColorEncoderParams.from_seed(cfg.seed, d_out=cfg.color_dim)
    src = encode_cloud(source, cfg, params, level=1)
    tgt = encode_cloud(target, cfg, params, level=1)
    # joint standardization, then a shared low-rank compression of the descriptors
    stacked = np.concatenate([src.descriptor, tgt.descriptor])
    mean, std = stacked.mean(axis=0), stacked.std(axis=0) + 1e-9
    stacked = (stacked - mean) / std
    proj = fit_low_rank(stacked, min(cfg.descriptor_rank, *stacked.shape))
    src.descriptor = proj.project((src.descriptor - mean) / std)
    tgt.descriptor = proj.project((tgt.descriptor - mean) / std)
    src2 = tgt2 = None
    if cfg.refine_voxel_size > 0:
        src2 = encode_cloud(source, cfg, params, level=2)
        tgt2 = encode_cloud(target, cfg, params, level=2)
    t1 = time.perf_counter()
    pose, coarse, fine, info = register_encoded(src, tgt, cfg, init, src2, tgt2)
    t2 = time.perf_counter()
    unit = src.scale if src2 is None else src2.scale
    coarse_m = CoarseResult(_rescale(coarse.transform, unit), coarse.A_final, coarse.active,
                            coarse.iterations, coarse.converged, coarse.objective_trace)
    fine_m = None if fine is None else FineResult(_rescale(fine.transform, unit), fine.loss_trace,
                                                  fine.steps, fine.converged)
    timing = {"model": t1 - t0, "pose": t2 - t1, "total": t2 - t0}
    return RegistrationResult(pose, coarse_m, fine_m, timing, len(src.splats), len(tgt.splats), info)
