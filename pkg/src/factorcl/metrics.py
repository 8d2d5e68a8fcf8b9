"""Continual-learning metrics: accuracy matrix, ACC, BWT, size accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class MetricsReport:
    """Results of one continual run.

    acc_matrix[j, i] is the test accuracy on task i+1 measured after
    training task j+1; entries above the diagonal are NaN (task not yet
    seen).  ACC averages the final row; BWT averages the change of each
    earlier task's accuracy between its own row and the final row.
    """

    acc_matrix: np.ndarray
    acc: float
    bwt: float
    size_bytes: int
    rank_allocation: list[list[int]] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def size_mb(self) -> float:
        """Decimal megabytes: 4 bytes per stored real, divided by 10^6."""
        return self.size_bytes / 1e6

    def to_json(self) -> str:
        matrix = [
            [None if np.isnan(v) else float(v) for v in row] for row in self.acc_matrix
        ]
        return json.dumps(
            {
                "acc_matrix": matrix,
                "acc": self.acc,
                "bwt": self.bwt,
                "size_bytes": self.size_bytes,
                "size_mb": self.size_mb,
                "rank_allocation": self.rank_allocation,
                "wall_clock": self.wall_clock,
                "config": self.config,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        blob = json.loads(text)
        matrix = np.array(
            [[np.nan if v is None else v for v in row] for row in blob["acc_matrix"]],
            dtype=np.float64,
        )
        return cls(
            acc_matrix=matrix,
            acc=blob["acc"],
            bwt=blob["bwt"],
            size_bytes=blob["size_bytes"],
            rank_allocation=blob.get("rank_allocation", []),
            wall_clock=blob.get("wall_clock", []),
            config=blob.get("config", {}),
        )


def as_matrix(rows) -> np.ndarray:
    """Normalize a list of lower-triangular rows into a NaN-padded square."""
    if isinstance(rows, np.ndarray) and rows.ndim == 2 and rows.shape[0] == rows.shape[1]:
        return rows.astype(np.float64)
    t = len(rows)
    out = np.full((t, t), np.nan)
    for j, row in enumerate(rows):
        if len(row) != j + 1:
            raise DataError(f"row {j} should have {j + 1} accuracies, got {len(row)}")
        out[j, : j + 1] = row
    return out


def compute_metrics(
    acc_rows,
    size_bytes: int,
    rank_allocation=None,
    wall_clock=None,
    config=None,
) -> MetricsReport:
    matrix = as_matrix(acc_rows)
    t = matrix.shape[0]
    lower = matrix[np.tril_indices(t)]
    if np.any(np.isnan(lower)):
        raise DataError("accuracy matrix has unpopulated lower-triangular entries")
    if lower.min() < 0.0 or lower.max() > 1.0:
        raise DataError("accuracies must lie in [0, 1]")
    acc = float(matrix[t - 1].mean())  # final row is fully populated
    if t == 1:
        bwt = 0.0
    else:
        diffs = [matrix[t - 1, i] - matrix[i, i] for i in range(t - 1)]
        bwt = float(np.mean(diffs))
    return MetricsReport(
        acc_matrix=matrix,
        acc=acc,
        bwt=bwt,
        size_bytes=int(size_bytes),
        rank_allocation=rank_allocation or [],
        wall_clock=wall_clock or [],
        config=config or {},
    )
