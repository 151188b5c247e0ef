"""Registration evaluation metrics: IR, FMR, RMSE/RR, PIR, RRE/RTE and outdoor RR."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform


@dataclass(frozen=True)
class MetricThresholds:
    delta_corr: float = 0.1  # m, inlier distance
    eta: float = 0.05  # minimum inlier ratio for FMR
    gamma_rmse: float = 0.2  # m, RMSE recall threshold
    zeta: float = 0.05  # m, patch overlap distance
    rre_max: float = 3.0  # degrees
    rte_max: float = 1.5  # m

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"threshold {name} must be positive, got {v}")


def _as_pairs(corrs) -> np.ndarray:
    c = np.asarray(corrs, dtype=np.int64).reshape(-1, 2)
    if len(c) == 0:
        raise ValueError("no correspondences")
    return c


def _check_range(c: np.ndarray, n_p: int, n_q: int):
    if c.min() < 0 or c[:, 0].max() >= n_p or c[:, 1].max() >= n_q:
        raise IndexError("correspondence index out of range")


def inlier_ratio(corrs, P, Q, T_gt: RigidTransform, delta_corr: float = 0.1) -> float:
    """Fraction of correspondences (i, j) with ``|T_gt(p_i) - q_j| < delta_corr``."""
    c = _as_pairs(corrs)
    P, Q = np.asarray(P, float), np.asarray(Q, float)
    _check_range(c, len(P), len(Q))
    d = np.linalg.norm(T_gt.apply(P[c[:, 0]]) - Q[c[:, 1]], axis=1)
    return float(np.mean(d < delta_corr))


def feature_matching_recall(irs, eta: float = 0.05) -> float:
    irs = np.asarray(irs, dtype=float).reshape(-1)
    if len(irs) == 0:
        raise ValueError("no pairs")
    return float(np.mean(irs >= eta))


def correspondence_rmse(corrs, P, Q, T_est: RigidTransform) -> float:
    """Root mean squared residual of ground-truth correspondences under ``T_est`` (divided by |C*|)."""
    c = _as_pairs(corrs)
    P, Q = np.asarray(P, float), np.asarray(Q, float)
    _check_range(c, len(P), len(Q))
    r = T_est.apply(P[c[:, 0]]) - Q[c[:, 1]]
    return float(np.sqrt(np.sum(r**2) / len(c)))


def registration_rmse_recall(pairs, gamma_rmse: float = 0.2) -> tuple[list[float], float]:
    """``pairs``: iterable of ``(C*, P, Q, T_est)``. Returns per-pair RMSE and the fraction below ``gamma_rmse``."""
    rmses = [correspondence_rmse(c, P, Q, T) for c, P, Q, T in pairs]
    if not rmses:
        raise ValueError("no pairs")
    return rmses, float(np.mean(np.asarray(rmses) < gamma_rmse))


def patch_inlier_ratio(C, patches_p, patches_q, T_gt: RigidTransform, zeta: float = 0.05) -> float:
    """Fraction of superpoint pairs whose patches contain some point pair closer than ``zeta`` under ``T_gt``."""
    c = _as_pairs(C)
    _check_range(c, len(patches_p), len(patches_q))
    hits = 0
    for a, b in c:
        sp = np.asarray(patches_p[a], float).reshape(-1, 3)
        sq = np.asarray(patches_q[b], float).reshape(-1, 3)
        if len(sp) == 0 or len(sq) == 0:
            raise ValueError("empty patch")
        d, _ = cKDTree(sq).query(T_gt.apply(sp), k=1)
        hits += bool(np.min(d) < zeta)
    return hits / len(c)


def pose_errors(T_est: RigidTransform, T_gt: RigidTransform) -> tuple[float, float]:
    """(RRE in degrees, RTE in meters); the angle is computed in radians then converted.

    The angle equals arccos((trace(R_est^T R_gt) - 1) / 2) with the argument
    clamped to [-1, 1]; it is evaluated as atan2(sin, cos) with the sine taken
    from the skew part, which keeps full precision near 0 and 180 degrees.
    """
    D = T_est.R.T @ T_gt.R
    cos = np.clip((np.trace(D) - 1.0) / 2.0, -1.0, 1.0)
    sin = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    rre = float(np.degrees(np.arctan2(sin, cos)))
    return rre, float(np.linalg.norm(T_est.t - T_gt.t))


def rr_outdoor(errors, rre_max: float = 3.0, rte_max: float = 1.5) -> float:
    """Fraction of (RRE deg, RTE m) pairs with both below their thresholds."""
    e = np.asarray(errors, dtype=float).reshape(-1, 2)
    if len(e) == 0:
        raise ValueError("no pairs")
    return float(np.mean((e[:, 0] < rre_max) & (e[:, 1] < rte_max)))


@dataclass
class PairMetrics:
    pair_id: str
    RRE_deg: float
    RTE_m: float
    IR: float | None = None
    RMSE: float | None = None
    PIR: float | None = None


@dataclass
class MetricsReport:
    thresholds: MetricThresholds
    pairs: list = field(default_factory=list)
    FMR: float | None = None
    RR_indoor: float | None = None
    RR_outdoor: float | None = None
    skipped: list = field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs: list[PairMetrics], thresholds: MetricThresholds | None = None,
                   skipped=None) -> "MetricsReport":
        th = thresholds or MetricThresholds()
        rep = cls(th, list(pairs), skipped=list(skipped or []))
        if pairs:
            rep.RR_outdoor = rr_outdoor([(p.RRE_deg, p.RTE_m) for p in pairs], th.rre_max, th.rte_max)
            irs = [p.IR for p in pairs if p.IR is not None]
            if irs:
                rep.FMR = feature_matching_recall(irs, th.eta)
            rm = [p.RMSE for p in pairs if p.RMSE is not None]
            if rm:
                rep.RR_indoor = float(np.mean(np.asarray(rm) < th.gamma_rmse))
        return rep

    def to_dict(self) -> dict:
        return {
            "thresholds": asdict(self.thresholds),
            "pairs": [asdict(p) for p in self.pairs],
            "suite": {"FMR": self.FMR, "RR_indoor": self.RR_indoor, "RR_outdoor": self.RR_outdoor},
            "skipped": self.skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        th = self.thresholds
        lines = [
            f"thresholds: delta_corr={th.delta_corr} m  eta={th.eta}  gamma_rmse={th.gamma_rmse} m  "
            f"zeta={th.zeta} m  rre_max={th.rre_max} deg  rte_max={th.rte_max} m",
            f"{'pair':<24}{'RRE(deg)':>10}{'RTE(m)':>10}{'IR':>8}{'RMSE':>10}{'PIR':>8}",
        ]

        def fmt(v, w, p):
            return f"{'-':>{w}}" if v is None else f"{v:>{w}.{p}f}"

        for p in self.pairs:
            lines.append(f"{p.pair_id:<24}{fmt(p.RRE_deg, 10, 3)}{fmt(p.RTE_m, 10, 4)}"
                         f"{fmt(p.IR, 8, 3)}{fmt(p.RMSE, 10, 4)}{fmt(p.PIR, 8, 3)}")
        lines.append(f"FMR={fmt(self.FMR, 0, 3).strip()}  RR_indoor={fmt(self.RR_indoor, 0, 3).strip()}  "
                     f"RR_outdoor={fmt(self.RR_outdoor, 0, 3).strip()}")
        for s in self.skipped:
            lines.append(f"skipped: {s}")
        return "\n".join(lines)
