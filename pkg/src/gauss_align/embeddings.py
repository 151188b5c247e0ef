"""Rigid-invariant pair embeddings (Gaussian, color-distance, angle) and the
geometry-biased self-attention that consumes them.

All projections are seeded random matrices; nothing here is trained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .splats import GaussianSplat

PE_BASE = 10000.0
SIGMA_GS_RANGE = (0.01, 0.1)
LAMBDA_G_RANGE = (0.01, 1.0)


def sinusoidal_pe(x, d_t: int) -> np.ndarray:
    """``PE(x)[2i] = sin(x / base^(2i/d_t))``, ``PE(x)[2i+1] = cos(...)``; broadcasts over x."""
    if d_t % 2:
        raise ValueError("embedding dimension must be even")
    x = np.asarray(x, dtype=float)[..., None]
    freq = PE_BASE ** (-np.arange(0, d_t, 2) / d_t)
    out = np.empty(x.shape[:-1] + (d_t,))
    out[..., 0::2] = np.sin(x * freq)
    out[..., 1::2] = np.cos(x * freq)
    return out


_MATS = ("W_GS", "W_HD", "W_a", "W_D", "W_Q", "W_K", "W_V")


@dataclass
class EmbeddingParams:
    d_t: int
    W_GS: np.ndarray
    W_HD: np.ndarray
    W_a: np.ndarray
    W_D: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    sigma_gs: float = 0.05
    sigma_d: float = 1.0
    sigma_a: float = 0.25
    lambda_g: float = 0.1
    seed: int | None = None

    def __post_init__(self):
        if not SIGMA_GS_RANGE[0] <= self.sigma_gs <= SIGMA_GS_RANGE[1]:
            raise ValueError(f"sigma_gs must lie in [{SIGMA_GS_RANGE[0]}, {SIGMA_GS_RANGE[1]}]")
        if not LAMBDA_G_RANGE[0] <= self.lambda_g <= LAMBDA_G_RANGE[1] and self.lambda_g != 0.0:
            raise ValueError(f"lambda_g must lie in [{LAMBDA_G_RANGE[0]}, {LAMBDA_G_RANGE[1]}]")
        if self.sigma_d <= 0 or self.sigma_a <= 0:
            raise ValueError("sigma_d and sigma_a must be positive")
        for name in _MATS:
            W = np.asarray(getattr(self, name), dtype=float)
            if W.shape != (self.d_t, self.d_t) or not np.all(np.isfinite(W)):
                raise ValueError(f"{name} must be a finite {self.d_t}x{self.d_t} matrix")
            setattr(self, name, W)

    @classmethod
    def from_seed(cls, seed: int, d_t: int = 32, **hyper) -> "EmbeddingParams":
        rng = np.random.default_rng(seed)
        mats = {name: rng.normal(0.0, 1.0 / np.sqrt(d_t), (d_t, d_t)) for name in _MATS}
        return cls(d_t=d_t, seed=seed, **mats, **hyper)

    def to_json(self) -> str:
        d = {name: getattr(self, name).tolist() for name in _MATS}
        d.update(d_t=self.d_t, sigma_gs=self.sigma_gs, sigma_d=self.sigma_d, sigma_a=self.sigma_a,
                 lambda_g=self.lambda_g, seed=self.seed)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "EmbeddingParams":
        d = json.loads(text)
        return cls(**{k: (np.array(v) if k in _MATS else v) for k, v in d.items()})


def gaussian_embedding_arg(delta_mu, delta_cov, sigma_gs: float):
    # the covariance gap enters twice, i.e. 2 * delta_cov * delta_mu / sigma_gs
    return (delta_cov + delta_cov) * delta_mu / sigma_gs


def gaussian_embedding(gi: GaussianSplat, gj: GaussianSplat, params: EmbeddingParams) -> np.ndarray:
    d_mu = np.linalg.norm(gi.mu - gj.mu)
    d_cov = np.linalg.norm(gi.cov - gj.cov)
    return sinusoidal_pe(gaussian_embedding_arg(d_mu, d_cov, params.sigma_gs), params.d_t) @ params.W_GS


def color_distance_embedding(p_i, h_i, p_j, h_j, params: EmbeddingParams) -> np.ndarray:
    """``PE(dH * |p_i - p_j| / sigma_d) W_HD`` with ``dH`` the Euclidean hue gap."""
    d = np.linalg.norm(np.asarray(p_i, float) - np.asarray(p_j, float), axis=-1) / params.sigma_d
    dh = np.linalg.norm(np.atleast_1d(np.asarray(h_i, float)) - np.atleast_1d(np.asarray(h_j, float)), axis=-1)
    return sinusoidal_pe(dh * d, params.d_t) @ params.W_HD


def triplet_angles(p_i, p_j, anchors) -> np.ndarray:
    """atan2(|v_i x v_j|, v_i . v_j) per anchor; NaN where a leg is degenerate."""
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 3)
    vi = np.asarray(p_i, float) - anchors
    vj = np.asarray(p_j, float) - anchors
    ok = (np.linalg.norm(vi, axis=1) > 1e-12) & (np.linalg.norm(vj, axis=1) > 1e-12)
    theta = np.arctan2(np.linalg.norm(np.cross(vi, vj), axis=1), np.sum(vi * vj, axis=1))
    return np.where(ok, theta, np.nan)


def angle_embedding(p_i, p_j, neighbors_k, params: EmbeddingParams) -> np.ndarray:
    """Component-wise max over anchors k of ``PE(theta_ijk / sigma_a) W_a``."""
    theta = triplet_angles(p_i, p_j, neighbors_k)
    theta = theta[np.isfinite(theta)]
    if len(theta) == 0:
        raise ValueError("degenerate angle triplet")
    emb = sinusoidal_pe(theta / params.sigma_a, params.d_t) @ params.W_a
    return emb.max(axis=0)


def distance_embedding(p_i, p_j, params: EmbeddingParams) -> np.ndarray:
    d = np.linalg.norm(np.asarray(p_i, float) - np.asarray(p_j, float), axis=-1) / params.sigma_d
    return sinusoidal_pe(d, params.d_t) @ params.W_D


@dataclass
class PairEmbedding:
    """Per-pair embeddings for an ordered set of elements (tables are M x M x d_t)."""

    E_GS: np.ndarray
    E_HD: np.ndarray
    Ang: np.ndarray
    E_GSE: np.ndarray  # per element, M x d_t
    E_geo: np.ndarray  # color-distance + angle, M x M x d_t


def pair_embeddings(mu: np.ndarray, cov: np.ndarray, hue: np.ndarray, params: EmbeddingParams,
                    k_angle: int = 3) -> PairEmbedding:
    """All pair embeddings within one set of splats.

    Angle anchors for pair (i, j) are the ``k_angle`` nearest neighbors of i
    (excluding i). ``E_GSE`` pools distance, Gaussian, color-distance and
    angle embeddings over all partners by mean.
    """
    mu = np.asarray(mu, float)
    m = len(mu)
    hue = np.asarray(hue, float).reshape(m, -1)
    diff = mu[:, None, :] - mu[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    d_cov = np.linalg.norm((cov[:, None] - cov[None, :]).reshape(m, m, 9), axis=2)
    d_hue = np.linalg.norm(hue[:, None, :] - hue[None, :, :], axis=2)
    E_GS = sinusoidal_pe(gaussian_embedding_arg(dist, d_cov, params.sigma_gs), params.d_t) @ params.W_GS
    E_HD = sinusoidal_pe(d_hue * dist / params.sigma_d, params.d_t) @ params.W_HD
    E_D = sinusoidal_pe(dist / params.sigma_d, params.d_t) @ params.W_D

    kk = min(k_angle, m - 1)
    Ang = np.zeros((m, m, params.d_t))
    if kk >= 1:
        order = np.lexsort((np.broadcast_to(np.arange(m), (m, m)), dist), axis=1)[:, 1:kk + 1]
        anchors = mu[order]  # m x kk x 3
        vi = mu[:, None, None, :] - anchors[:, None, :, :]  # i, j, k
        vj = mu[None, :, None, :] - anchors[:, None, :, :]
        ok = (np.linalg.norm(vi, axis=3) > 1e-12) & (np.linalg.norm(vj, axis=3) > 1e-12)
        theta = np.arctan2(np.linalg.norm(np.cross(vi, vj), axis=3), np.sum(vi * vj, axis=3))
        emb = sinusoidal_pe(theta / params.sigma_a, params.d_t) @ params.W_a
        emb = np.where(ok[..., None], emb, -np.inf)
        Ang = emb.max(axis=2)
        Ang = np.where(np.isfinite(Ang), Ang, 0.0)

    E_geo = E_HD + Ang
    E_GSE = (E_D + E_GS + E_geo).mean(axis=1)
    return PairEmbedding(E_GS=E_GS, E_HD=E_HD, Ang=Ang, E_GSE=E_GSE, E_geo=E_geo)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gs_self_attention(E_GSE: np.ndarray, E_geo, params: EmbeddingParams):
    """Single-head attention with an additive ``lambda_g * log(1 + E_geo)`` bias.

    ``E_geo`` is either M x M scalars or M x M x d_t vectors (reduced by
    mean); it is clamped at zero before the log. Returns ``(outputs, weights)``.
    """
    E = np.asarray(E_GSE, dtype=float)
    if E.ndim != 2 or E.shape[1] != params.d_t:
        raise ValueError(f"expected an M x {params.d_t} embedding matrix")
    m = len(E)
    if m == 0:
        raise ValueError("empty element set")
    geo = np.asarray(E_geo, dtype=float)
    if geo.ndim == 3:
        geo = geo.mean(axis=2)
    geo = np.broadcast_to(geo, (m, m))
    Q = E @ params.W_Q
    K = E @ params.W_K
    V = E @ params.W_V
    logits = Q @ K.T / np.sqrt(params.d_t) + params.lambda_g * np.log1p(np.maximum(geo, 0.0))
    weights = _softmax_rows(logits)
    return weights @ V, weights
