"""Post-training singular-value sorting and energy pruning.

After a task trains, each layer's singular values are sorted by
magnitude (folding signs into U so reconstruction is unchanged) and the
smallest prefix of columns whose squared sum reaches a (1 - e) fraction
of the total energy is kept.  No fine-tuning happens afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .factorized import TaskFactors

RULES = ("energy_ratio", "tail_vs_retained")


@dataclass(frozen=True)
class PruneConfig:
    """energy_e in [0, 1) controls pruning intensity; higher prunes more.

    rule selects the retention criterion: "energy_ratio" keeps the
    minimal k with retained/total >= 1 - e; "tail_vs_retained" keeps the
    minimal k with tail energy <= e * retained energy.  The two differ
    only in how e scales (e*total vs e*retained).
    """

    energy_e: float
    min_rank: int = 1
    rule: str = "energy_ratio"

    def __post_init__(self):
        if not 0.0 <= self.energy_e < 1.0:
            raise ValueError(f"energy_e must be in [0, 1), got {self.energy_e}")
        if self.min_rank < 1:
            raise ValueError(f"min_rank must be >= 1, got {self.min_rank}")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")


def sort_by_magnitude(f: TaskFactors) -> TaskFactors:
    """Jointly permute (U columns, sigma, V columns) to |sigma| descending.

    Negative entries are folded positive by negating the matching U
    column, leaving U diag(sigma) V^T unchanged.
    """
    u_out, s_out, v_out = [], [], []
    for u, s, v in zip(f.u, f.sigma, f.v):
        order = np.argsort(-np.abs(s), kind="stable")
        u2 = np.ascontiguousarray(u[:, order])
        s2 = s[order].copy()
        v2 = np.ascontiguousarray(v[:, order])
        neg = s2 < 0
        if np.any(neg):
            s2 = np.abs(s2)
            u2[:, neg] = -u2[:, neg]
        u_out.append(u2)
        s_out.append(s2)
        v_out.append(v2)
    return TaskFactors(task=f.task, u=u_out, sigma=s_out, v=v_out)


def retained_rank(sigma: np.ndarray, cfg: PruneConfig) -> int:
    """Minimal prefix length meeting the energy criterion, clamped to min_rank."""
    r = sigma.shape[0]
    if r == 0:
        return 0
    if np.any(sigma < 0) or np.any(np.diff(sigma) > 0):
        raise ValueError("sigma must be sorted descending and non-negative")
    floor = min(cfg.min_rank, r)
    energy = sigma.astype(np.float64) ** 2
    total = float(energy.sum())
    if total == 0.0:
        return floor
    cum = np.cumsum(energy)
    if cfg.rule == "energy_ratio":
        hit = cum / total >= 1.0 - cfg.energy_e
    else:
        hit = (total - cum) <= cfg.energy_e * cum
    k = int(np.argmax(hit)) + 1 if np.any(hit) else r
    return max(k, floor)


def energy_prune(sorted_f: TaskFactors, cfg: PruneConfig) -> TaskFactors:
    """Keep the leading retained_rank columns per layer."""
    u_out, s_out, v_out = [], [], []
    for u, s, v in zip(sorted_f.u, sorted_f.sigma, sorted_f.v):
        k = retained_rank(s, cfg)
        u_out.append(np.ascontiguousarray(u[:, :k]))
        s_out.append(s[:k].copy())
        v_out.append(np.ascontiguousarray(v[:, :k]))
    return TaskFactors(task=sorted_f.task, u=u_out, sigma=s_out, v=v_out)


def compress(f: TaskFactors, cfg: PruneConfig) -> TaskFactors:
    return energy_prune(sort_by_magnitude(f), cfg)


def cap_ranks(f: TaskFactors, caps) -> TaskFactors:
    """Truncate each layer to at most caps[l] leading columns.

    Used by the fixed-capacity mode where total stored width may never
    exceed the first task's expansion width; sigma is sorted, so the
    kept prefix is the best available truncation.
    """
    u_out, s_out, v_out = [], [], []
    for u, s, v, cap in zip(f.u, f.sigma, f.v, caps):
        k = min(s.shape[0], max(int(cap), 0))
        u_out.append(np.ascontiguousarray(u[:, :k]))
        s_out.append(s[:k].copy())
        v_out.append(np.ascontiguousarray(v[:, :k]))
    return TaskFactors(task=f.task, u=u_out, sigma=s_out, v=v_out)
