"""Photometric pose refinement over rendered Gaussian splats.

The rasterizer projects each splat to a 2-D Gaussian (first-order EWA),
truncates it at 3 sigma and alpha-composites front to back. The loss is
piecewise smooth in the pose: the splat/pixel support, depth order, opacity
clamps, overlap mask and nearest-mean assignments are locally constant. The
analytic gradient differentiates everything else (projected centers, 2-D
covariances and the pixel weights), so it is the exact derivative wherever
that discrete structure does not change. ``exact_gradient=False`` keeps only
the center terms.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .coarse import MahalanobisObjective, correspondence_matrix, CoarseConfig, precisions
from .geometry import RigidTransform, se3_exp
from .splats import SplatSet

GAMMA_D_RANGE = (1.0, 3.0)
LAMBDA_P_RANGE = (0.1, 1.0)
ALPHA_MAX = 0.99
DILATION = 0.3  # px^2 added to every projected covariance
TRUNC_SIGMA = 3.0
NEAR = 1e-6


class NoPhotometricOverlap(RuntimeError):
    pass


@dataclass(frozen=True)
class VirtualCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: RigidTransform  # world -> camera, z forward, y down
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("resolution must be at least 8x8")

    def backproject(self, px: np.ndarray, py: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates plus camera depth -> world points."""
        X = np.stack([(px - self.cx) / self.fx * depth, (py - self.cy) / self.fy * depth, depth], axis=-1)
        return self.pose.inverse().apply(X)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (1.0, 0.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return RigidTransform(R, -R @ eye)


def default_cameras(center, radius: float, n: int = 4, size: int = 64,
                    elevation_deg: float = 30.0) -> list[VirtualCamera]:
    """``n`` cameras on a circle of radius ``2 * radius`` around ``center``, all looking at it."""
    center = np.asarray(center, float)
    radius = max(float(radius), 1e-6)
    dist = 2.0 * radius
    el = np.deg2rad(elevation_deg)
    f = (size / 2.0) / 0.6  # half field of view: tan = 0.6 > radius / dist
    cams = []
    for k in range(n):
        az = 2 * np.pi * k / n
        eye = center + dist * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(VirtualCamera(f, f, size / 2.0, size / 2.0, look_at(eye, center), size, size))
    return cams


@dataclass
class RenderedImage:
    rgb: np.ndarray  # H x W x 3
    hit: np.ndarray  # H x W
    depth: np.ndarray  # H x W, inf where no hit


@dataclass
class _Raster:
    """Frozen per-camera rasterization structure plus its current image."""

    splat: np.ndarray  # per (splat, pixel) pair, sorted by (pixel, depth rank)
    pixel: np.ndarray
    seg: np.ndarray  # per pair: index of its pixel segment
    pos: np.ndarray  # per pair: depth position within the segment
    n_seg: int
    width: int
    conic: np.ndarray  # per splat inverse 2-D covariance
    clamped: np.ndarray  # per pair: opacity saturated at ALPHA_MAX
    image: RenderedImage
    # quantities at the linearization pose, reused by the backward pass
    alpha: np.ndarray = None
    T: np.ndarray = None
    delta: np.ndarray = None
    mu_w: np.ndarray = None
    mu_c: np.ndarray = None
    J: np.ndarray = None  # per splat projection Jacobian
    cov_c: np.ndarray = None  # per splat camera-frame 3-D covariance
    first: np.ndarray = None  # per pixel nearest contributing splat, -1 if none


def _project(mu_w: np.ndarray, cam: VirtualCamera):
    mu_c = cam.pose.apply(mu_w)
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    zs = np.where(z > NEAR, z, 1.0)
    u = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    J = np.zeros((len(mu_c), 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    return mu_c, u, J


def _segments(pixel: np.ndarray):
    """Per-pair (segment id, position in segment) for pairs already sorted by pixel."""
    first = np.ones(len(pixel), bool)
    first[1:] = pixel[1:] != pixel[:-1]
    seg = np.cumsum(first) - 1
    start = np.flatnonzero(first)
    pos = np.arange(len(pixel)) - start[seg]
    return seg, pos, len(start), int(pos.max()) + 1 if len(pos) else 0


def _padded(values: np.ndarray, seg, pos, n_seg, width, fill=0.0) -> np.ndarray:
    out = np.full((n_seg, width) + values.shape[1:], fill)
    out[seg, pos] = values
    return out


def _composite(alpha, rgb_pairs, pixel, seg, pos, n_seg, width, n_pix):
    A = _padded(alpha, seg, pos, n_seg, width)
    Tm = np.ones_like(A)
    Tm[:, 1:] = np.cumprod(1.0 - A[:, :-1], axis=1)
    T = Tm[seg, pos]
    w = alpha * T
    img = np.zeros((n_pix, 3))
    for c in range(3):
        img[:, c] = np.bincount(pixel, weights=w * rgb_pairs[:, c], minlength=n_pix)
    return img, T, w


def _rasterize(splats: SplatSet, cam: VirtualCamera, pose: RigidTransform) -> _Raster:
    W, H = cam.width, cam.height
    n_pix = W * H
    mu_w = pose.apply(splats.mu)
    mu_c, u, J = _project(mu_w, cam)
    Rc = cam.pose.R @ pose.R
    cov_c = np.einsum("ab,nbc,dc->nad", Rc, splats.cov, Rc)
    cov2 = np.einsum("nab,nbc,ndc->nad", J, cov_c, J) + DILATION * np.eye(2)
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    # degenerate footprints (splats at the camera plane) are dropped by the visibility test below
    with np.errstate(divide="ignore", invalid="ignore"):
        conic = np.stack([np.stack([cov2[:, 1, 1], -cov2[:, 0, 1]], 1),
                          np.stack([-cov2[:, 1, 0], cov2[:, 0, 0]], 1)], 1) / det[:, None, None]
    half_tr = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1])
    lam_max = half_tr + np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    rad = TRUNC_SIGMA * np.sqrt(lam_max)
    x0 = np.maximum(np.ceil(u[:, 0] - rad), 0).astype(np.int64)
    x1 = np.minimum(np.floor(u[:, 0] + rad), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(u[:, 1] - rad), 0).astype(np.int64)
    y1 = np.minimum(np.floor(u[:, 1] + rad), H - 1).astype(np.int64)
    visible = (mu_c[:, 2] > NEAR) & (x1 >= x0) & (y1 >= y0) & np.isfinite(rad)
    bw = np.where(visible, x1 - x0 + 1, 0)
    bh = np.where(visible, y1 - y0 + 1, 0)
    counts = bw * bh
    total = int(counts.sum())
    empty = RenderedImage(np.zeros((H, W, 3)), np.zeros((H, W), bool), np.full((H, W), np.inf))
    if total == 0:
        z = np.zeros(0, np.int64)
        return _Raster(z, z, z, z, 0, 0, conic, np.zeros(0, bool), empty,
                       np.zeros(0), np.zeros(0), np.zeros((0, 2)), mu_w, mu_c, J, cov_c,
                       np.full(n_pix, -1, np.int64))
    sid = np.repeat(np.arange(len(splats)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[sid] + local % bw[sid]
    py = y0[sid] + local // bw[sid]
    delta = np.stack([px - u[sid, 0], py - u[sid, 1]], axis=1)
    q = np.einsum("na,nab,nb->n", delta, conic[sid], delta)
    keep = q <= TRUNC_SIGMA**2
    sid, px, py, delta, q = sid[keep], px[keep], py[keep], delta[keep], q[keep]
    # front-to-back: depth rank per splat, ties by index
    rank = np.empty(len(splats), np.int64)
    rank[np.lexsort((np.arange(len(splats)), mu_c[:, 2]))] = np.arange(len(splats))
    pixel = py * W + px
    order = np.lexsort((rank[sid], pixel))
    sid, pixel, delta, q = sid[order], pixel[order], delta[order], q[order]
    seg, pos, n_seg, width = _segments(pixel)
    first = pos == 0
    raw = splats.alpha[sid] * np.exp(-0.5 * q)
    clamped = raw > ALPHA_MAX
    alpha = np.where(clamped, ALPHA_MAX, raw)
    img, T, _ = _composite(alpha, splats.rgb[sid], pixel, seg, pos, n_seg, width, n_pix)
    hit = np.zeros(n_pix, bool)
    hit[pixel] = True
    depth = np.full(n_pix, np.inf)
    depth[pixel[first]] = mu_c[sid[first], 2]
    front = np.full(n_pix, -1, np.int64)
    front[pixel[first]] = sid[first]
    image = RenderedImage(img.reshape(H, W, 3), hit.reshape(H, W), depth.reshape(H, W))
    return _Raster(sid, pixel, seg, pos, n_seg, width, conic, clamped, image, alpha, T, delta, mu_w, mu_c,
                   J, cov_c, front)


def render_splats(splats: SplatSet, cam: VirtualCamera, pose: RigidTransform | None = None) -> RenderedImage:
    """Render ``splats`` moved by ``pose`` (identity if omitted) through ``cam``."""
    return _rasterize(splats, cam, pose or RigidTransform.identity()).image


def _frozen_render(r: _Raster, splats: SplatSet, cam: VirtualCamera, pose: RigidTransform):
    """Re-evaluate a frozen raster at another pose; returns (flat rgb image, alpha, T, delta, mu_w, mu_c)."""
    mu_w = pose.apply(splats.mu)
    mu_c, u, _ = _project(mu_w, cam)
    pix_xy = np.stack([r.pixel % cam.width, r.pixel // cam.width], axis=1)
    delta = pix_xy - u[r.splat]
    q = np.einsum("na,nab,nb->n", delta, r.conic[r.splat], delta)
    alpha = np.where(r.clamped, ALPHA_MAX, splats.alpha[r.splat] * np.exp(-0.5 * q))
    img, T, _ = _composite(alpha, splats.rgb[r.splat], r.pixel, r.seg, r.pos, r.n_seg, r.width,
                           cam.width * cam.height)
    return img, alpha, T, delta, mu_w, mu_c


# [e_k]x for k = 0, 1, 2
_SKEW_BASIS = np.array([[[0, 0, 0], [0, 0, -1], [0, 1, 0]],
                        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
                        [[0, -1, 0], [1, 0, 0], [0, 0, 0]]], dtype=float)


def _raster_backward(r: _Raster, splats: SplatSet, cam: VirtualCamera, dL_dC: np.ndarray,
                     alpha, T, delta, mu_w, mu_c, dL_ddepth: np.ndarray | None = None,
                     shape_terms: bool = True) -> np.ndarray:
    """Chain rule from per-pixel color (and depth) gradients to a left-perturbation twist gradient."""
    n = len(splats)
    g_cam = np.zeros((n, 3))
    g_rot = np.zeros(3)
    if len(r.splat):
        c = splats.rgb[r.splat]
        wc = (alpha * T)[:, None] * c
        # suffix sums within each pixel segment: contributions of later (farther) pairs
        P = _padded(wc, r.seg, r.pos, r.n_seg, r.width)
        suffix = np.cumsum(P[:, ::-1], axis=1)[:, ::-1] - P
        after = suffix[r.seg, r.pos]
        dC_da = c * T[:, None] - after / (1.0 - alpha)[:, None]
        g_alpha = np.sum(dL_dC[r.pixel] * dC_da, axis=1)
        g_alpha = np.where(r.clamped, 0.0, g_alpha) * alpha
        # alpha = o exp(-q/2): d alpha/d u = alpha Con delta, d alpha/d Cov2 = alpha/2 (Con delta)(Con delta)^T
        cd = np.einsum("nab,nb->na", r.conic[r.splat], delta)
        gu = np.stack([np.bincount(r.splat, weights=g_alpha * cd[:, k], minlength=n) for k in range(2)], axis=1)
        J = r.J
        g_cam += np.einsum("na,nab->nb", gu, J)
        if shape_terms:
            outer = 0.5 * g_alpha[:, None, None] * cd[:, :, None] * cd[:, None, :]
            G = np.stack([np.bincount(r.splat, weights=outer[:, a, b], minlength=n)
                          for a in range(2) for b in range(2)], axis=1).reshape(n, 2, 2)
            # Cov2 = J Cov_c J^T: through J (depends on the camera-frame mean) ...
            GJS = G @ J @ r.cov_c
            x, y = mu_c[:, 0], mu_c[:, 1]
            z = np.where(mu_c[:, 2] > NEAR, mu_c[:, 2], 1.0)
            g_cam[:, 0] += 2 * GJS[:, 0, 2] * (-cam.fx / z**2)
            g_cam[:, 1] += 2 * GJS[:, 1, 2] * (-cam.fy / z**2)
            g_cam[:, 2] += 2 * (GJS[:, 0, 0] * (-cam.fx / z**2) + GJS[:, 0, 2] * (2 * cam.fx * x / z**3)
                                + GJS[:, 1, 1] * (-cam.fy / z**2) + GJS[:, 1, 2] * (2 * cam.fy * y / z**3))
            # ... and through the rotated covariance: d Cov_w = [w]x Cov_w - Cov_w [w]x
            Rcam = cam.pose.R
            M_w = np.einsum("ba,nbc,cd->nad", Rcam, np.einsum("nba,nbc,ncd->nad", J, G, J), Rcam)
            cov_w = np.einsum("ba,nbc,cd->nad", Rcam, r.cov_c, Rcam)
            C = cov_w @ M_w - M_w @ cov_w
            g_rot += np.einsum("nab,kba->k", C, _SKEW_BASIS)
    if dL_ddepth is not None:
        # pixel depth is the camera z of the nearest contributing splat
        px = np.flatnonzero(dL_ddepth)
        g_cam[:, 2] += np.bincount(r.first[px], weights=dL_ddepth[px], minlength=n)
    g_world = g_cam @ cam.pose.R
    return np.concatenate([np.sum(np.cross(mu_w, g_world), axis=0) + g_rot, g_world.sum(axis=0)])


@dataclass
class FineConfig:
    gamma_d: float = 2.0
    lambda_p: float = 0.5
    eta: float = 0.1
    max_steps: int = 100
    beta: float = 0.5
    cameras: list = field(default_factory=list)
    # stop once the accepted relative decrease falls below this; 0 disables
    ftol: float = 0.0
    dump_dir: str | None = None
    # False: differentiate through projected centers only (2-D shapes and pixel weights held fixed)
    exact_gradient: bool = True
    # longest trial twist per step (rad / length units); None leaves eta uncapped
    max_twist: float | None = None
    # cap on halvings per step; None halves until eta < 1e-12
    max_backtracks: int | None = None

    def __post_init__(self):
        if not GAMMA_D_RANGE[0] <= self.gamma_d <= GAMMA_D_RANGE[1]:
            raise ValueError(f"gamma_d must lie in [{GAMMA_D_RANGE[0]}, {GAMMA_D_RANGE[1]}], got {self.gamma_d}")
        if not LAMBDA_P_RANGE[0] <= self.lambda_p <= LAMBDA_P_RANGE[1]:
            raise ValueError(f"lambda_p must lie in [{LAMBDA_P_RANGE[0]}, {LAMBDA_P_RANGE[1]}], got {self.lambda_p}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.eta <= 0 or self.max_steps < 0 or (self.max_twist is not None and self.max_twist <= 0) or (self.max_backtracks or 0) < 0:
            raise ValueError("eta and max_twist must be positive, max_steps and max_backtracks non-negative")


@dataclass
class PhotometricTerms:
    loss: float
    residuals: list  # per camera: (pixel indices, weights, color residual I1 - I2)


@dataclass
class Linearization:
    pose: RigidTransform
    rasters: list
    overlap: list  # per camera flat pixel indices
    weights: list
    # per camera (back-projected source points, nearest target means, distances d_i)
    geometry: list = None

    def signature(self) -> tuple:
        """Discrete structure of the loss; the loss is smooth where this is constant."""
        return tuple((r.splat.tobytes(), r.pixel.tobytes(), r.clamped.tobytes(), pix.tobytes(), g[3].tobytes())
                     for r, pix, g in zip(self.rasters, self.overlap, self.geometry))


class PhotometricProblem:
    """Caches the target renders and the nearest-mean index shared by every evaluation."""

    def __init__(self, G1: SplatSet, G2: SplatSet, cfg: FineConfig):
        if not cfg.cameras:
            raise ValueError("at least one camera is required")
        self.G1, self.G2, self.cfg = G1, G2, cfg
        self.targets = [render_splats(G1, cam) for cam in cfg.cameras]
        self._tree = cKDTree(G1.mu) if len(G1) else None

    def _weights(self, cam, img: RenderedImage, pix: np.ndarray):
        if len(pix) == 0 or self._tree is None:
            empty = np.zeros((len(pix), 3))
            return np.ones(len(pix)), (empty, empty, np.zeros(len(pix)), np.zeros(len(pix), np.int64))
        pts = cam.backproject(pix % cam.width, pix // cam.width, img.depth.reshape(-1)[pix])
        d, nn = self._tree.query(pts)
        return np.exp(-self.cfg.gamma_d * d), (pts, self.G1.mu[nn], d, nn.astype(np.int64))

    def linearize(self, pose: RigidTransform) -> Linearization:
        rasters, overlap, weights, geometry = [], [], [], []
        for cam, tgt in zip(self.cfg.cameras, self.targets):
            r = _rasterize(self.G2, cam, pose)
            pix = np.flatnonzero(tgt.hit.reshape(-1) & r.image.hit.reshape(-1))
            w, geo = self._weights(cam, r.image, pix)
            rasters.append(r)
            overlap.append(pix)
            weights.append(w)
            geometry.append(geo)
        if not any(len(p) for p in overlap):
            raise NoPhotometricOverlap("no photometric overlap")
        return Linearization(pose, rasters, overlap, weights, geometry)

    def terms(self, lin: Linearization) -> PhotometricTerms:
        total, res = 0.0, []
        for cam, tgt, r, pix, w in zip(self.cfg.cameras, self.targets, lin.rasters, lin.overlap, lin.weights):
            diff = tgt.rgb.reshape(-1, 3)[pix] - r.image.rgb.reshape(-1, 3)[pix]
            total += float(np.sum(w * np.sum(diff**2, axis=1)))
            res.append((pix, w, diff))
        return PhotometricTerms(total / len(self.cfg.cameras), res)

    def loss(self, pose: RigidTransform) -> float:
        return self.terms(self.linearize(pose)).loss

    def frozen_loss(self, lin: Linearization, pose: RigidTransform) -> float:
        """Loss with ``lin``'s structure, 2-D shapes and weights held fixed while the centers move to ``pose``."""
        total = 0.0
        for cam, tgt, r, pix, w in zip(self.cfg.cameras, self.targets, lin.rasters, lin.overlap, lin.weights):
            img = _frozen_render(r, self.G2, cam, pose)[0]
            diff = tgt.rgb.reshape(-1, 3)[pix] - img[pix]
            total += float(np.sum(w * np.sum(diff**2, axis=1)))
        return total / len(self.cfg.cameras)

    def gradient(self, lin: Linearization, exact: bool | None = None) -> np.ndarray:
        exact = self.cfg.exact_gradient if exact is None else exact
        g = np.zeros(6)
        for cam, tgt, r, pix, w, geo in zip(self.cfg.cameras, self.targets, lin.rasters, lin.overlap,
                                            lin.weights, lin.geometry):
            n_pix = cam.width * cam.height
            diff = tgt.rgb.reshape(-1, 3)[pix] - r.image.rgb.reshape(-1, 3)[pix]
            dL_dC = np.zeros((n_pix, 3))
            # d/dI2 of w |I1 - I2|^2 is -2 w (I1 - I2)
            dL_dC[pix] = -2.0 * w[:, None] * diff
            dL_ddepth = None
            if exact:
                # w = exp(-gamma_d d), d = |X - m|, X = back-projection of the pixel at its depth
                X, m, d, _ = geo
                ok = d > 0
                ray = np.stack([(pix % cam.width - cam.cx) / cam.fx, (pix // cam.width - cam.cy) / cam.fy,
                                np.ones(len(pix))], axis=1) @ cam.pose.R
                unit = np.where(ok[:, None], X - m, 0.0) / np.where(ok, d, 1.0)[:, None]
                dL_ddepth = np.zeros(n_pix)
                dL_ddepth[pix] = np.sum(diff**2, axis=1) * (-self.cfg.gamma_d * w) * np.sum(unit * ray, axis=1)
            g += _raster_backward(r, self.G2, cam, dL_dC, r.alpha, r.T, r.delta, r.mu_w, r.mu_c,
                                  dL_ddepth=dL_ddepth, shape_terms=exact)
        return g / len(self.cfg.cameras)


def photometric_loss(G1: SplatSet, G2: SplatSet, pose: RigidTransform, cfg: FineConfig) -> PhotometricTerms:
    """Weighted squared color difference between renders of ``G1`` and of ``G2`` moved by ``pose``."""
    prob = PhotometricProblem(G1, G2, cfg)
    return prob.terms(prob.linearize(pose))


def se3_photometric_gradient(G1: SplatSet, G2: SplatSet, pose: RigidTransform, cfg: FineConfig) -> np.ndarray:
    """Analytic gradient w.r.t. a left-perturbation twist (rotation part first)."""
    prob = PhotometricProblem(G1, G2, cfg)
    return prob.gradient(prob.linearize(pose))


class GeometricLoss:
    """Mahalanobis alignment objective with a frozen correspondence matrix."""

    def __init__(self, source: SplatSet, target: SplatSet, A: np.ndarray, active=None):
        src = source if active is None else source.subset(np.asarray(active))
        self.objective = MahalanobisObjective.build(src.mu, target.mu, precisions(target.cov), A)

    def __call__(self, pose: RigidTransform) -> float:
        return self.objective(pose)

    def gradient(self, pose: RigidTransform) -> np.ndarray:
        return self.objective.gradient(pose)


def geometric_loss(source: SplatSet, target: SplatSet, pose: RigidTransform, A: np.ndarray | None = None,
                   active=None) -> float:
    """Alignment objective at ``pose``; ``A`` defaults to soft correspondences computed at ``pose``."""
    if A is None:
        A = correspondence_matrix(source.transformed(pose), target, CoarseConfig())
    return GeometricLoss(source, target, A, active)(pose)


@dataclass
class FineResult:
    transform: RigidTransform
    loss_trace: list
    steps: int
    converged: bool

    def to_json(self) -> str:
        return json.dumps({
            "pose": self.transform.as_matrix().reshape(-1).tolist(),
            "loss_trace": [float(v) for v in self.loss_trace],
            "steps": self.steps,
            "converged": self.converged,
        })


def _numeric_gradient(fn, pose: RigidTransform, h: float = 1e-6) -> np.ndarray:
    g = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        g[k] = (fn(se3_exp(e) @ pose) - fn(se3_exp(-e) @ pose)) / (2 * h)
    return g


def finite_difference_gradient(prob: PhotometricProblem, pose: RigidTransform, h: float = 1e-5,
                               min_h: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of the photometric loss on each twist coordinate.

    The step is halved per coordinate until both probes share the base pose's
    discrete structure, so the stencil never straddles a jump of the
    piecewise-smooth loss. Returns ``(gradient, step used per coordinate)``.
    """
    base = prob.linearize(pose).signature()
    g = np.zeros(6)
    used = np.zeros(6)
    for k in range(6):
        step = h
        while True:
            e = np.zeros(6)
            e[k] = step
            lp, lm = prob.linearize(se3_exp(e) @ pose), prob.linearize(se3_exp(-e) @ pose)
            if (lp.signature() == base and lm.signature() == base) or step / 2 < min_h:
                break
            step /= 2
        g[k] = (prob.terms(lp).loss - prob.terms(lm).loss) / (2 * step)
        used[k] = step
    return g, used


def fine_register(G1: SplatSet, G2: SplatSet, init: RigidTransform, cfg: FineConfig,
                  L_geo_fn=None) -> FineResult:
    """Gradient descent on ``L_geo + lambda_p * L_photo`` over left-perturbation twists.

    ``G1`` is the target (rendered fixed), ``G2`` the source (rendered at the
    current pose). Each step backtracks until the total loss does not increase,
    so the returned trace is non-increasing.
    """
    prob = PhotometricProblem(G1, G2, cfg)

    def geo(pose):
        return 0.0 if L_geo_fn is None else float(L_geo_fn(pose))

    def geo_grad(pose):
        if L_geo_fn is None:
            return np.zeros(6)
        if hasattr(L_geo_fn, "gradient"):
            return L_geo_fn.gradient(pose)
        return _numeric_gradient(L_geo_fn, pose)

    def evaluate(pose):
        try:
            lin = prob.linearize(pose)
        except NoPhotometricOverlap:
            return np.inf, None
        return geo(pose) + cfg.lambda_p * prob.terms(lin).loss, lin

    pose = init
    L, lin = evaluate(pose)
    if lin is None:
        raise NoPhotometricOverlap("no photometric overlap")
    trace = [L]
    converged = False
    eta = cfg.eta
    steps = 0
    for steps in range(1, cfg.max_steps + 1):
        g = geo_grad(pose) + cfg.lambda_p * prob.gradient(lin)
        if np.linalg.norm(g) < 1e-8:
            converged = True
            steps -= 1
            break
        eta = min(cfg.eta, eta / cfg.beta)
        if cfg.max_twist is not None:
            eta = min(eta, cfg.max_twist / np.linalg.norm(g))
        accepted = False
        tries = 0
        while eta >= 1e-12 and (cfg.max_backtracks is None or tries <= cfg.max_backtracks):
            tries += 1
            cand = se3_exp(-eta * g) @ pose
            Lc, lin_c = evaluate(cand)
            if Lc <= L:
                accepted = True
                break
            eta *= cfg.beta
        if not accepted:
            steps -= 1
            break
        decrease = L - Lc
        pose, L, lin = cand, Lc, lin_c
        trace.append(L)
        if cfg.dump_dir:
            _dump(cfg, lin, steps)
        if cfg.ftol > 0 and decrease <= cfg.ftol * max(abs(trace[-2]), 1e-300):
            converged = True
            break
    return FineResult(pose, trace, steps, converged)


def _dump(cfg: FineConfig, lin: Linearization, step: int) -> None:
    from .datasets import write_ppm

    os.makedirs(cfg.dump_dir, exist_ok=True)
    for k, r in enumerate(lin.rasters):
        write_ppm(os.path.join(cfg.dump_dir, f"step{step:04d}_cam{k}.ppm"), r.image.rgb)
