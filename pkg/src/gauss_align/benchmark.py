"""Synthetic registration sweeps shared by the acceptance suite and the scripts."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .datasets import SyntheticPairSpec, generate_pair, generate_twin_rooms
from .metrics import pose_errors
from .pipeline import RunConfig, register

RRE_OK_DEG = 1.0
RTE_OK_M = 0.05


@dataclass
class PairOutcome:
    seed: int
    rre_deg: float
    rte_m: float
    seconds: float

    @property
    def success(self) -> bool:
        return self.rre_deg < RRE_OK_DEG and self.rte_m < RTE_OK_M


def run_pairs(overlap: float, seeds, cfg: RunConfig | None = None, twin: bool = False,
              n_points: int = 5000) -> list[PairOutcome]:
    """Register one generated pair per seed and record its pose errors."""
    cfg = cfg or RunConfig()
    make = generate_twin_rooms if twin else generate_pair
    out = []
    for s in seeds:
        pair = make(SyntheticPairSpec(n_points=n_points, overlap=overlap, seed=int(s)))
        t0 = time.perf_counter()
        res = register(pair.source, pair.target, cfg)
        rre, rte = pose_errors(res.transform, pair.T_gt)
        out.append(PairOutcome(int(s), rre, rte, time.perf_counter() - t0))
    return out


def success_rate(outcomes: list[PairOutcome]) -> float:
    return sum(o.success for o in outcomes) / len(outcomes) if outcomes else 0.0
