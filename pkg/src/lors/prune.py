"""One-shot weight pruning: magnitude, activation-scaled, and 2:4 structured.

Zeros encode the mask: a pruned entry is exactly 0.0 and the mask of a
``SparseWeight`` is simply ``values != 0``. No separate bitmap is stored.

Tie handling is fixed so results are reproducible: when scores are equal, the
entry with the smaller (row, col) index is removed first. For 2:4 groups this
means a group of four equal scores keeps its last two entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ArgumentError, ShapeError
from .matrix import DenseMatrix


@dataclass
class CalibrationBatch:
    """Activations for scoring: x is C x L (feature rows, sample columns)."""

    x: DenseMatrix

    def feature_norms(self) -> np.ndarray:
        """Euclidean norm of each feature row; length C."""
        return np.linalg.norm(self.x.data, axis=1)


@dataclass
class SparseWeight:
    """Pruned weight values plus a descriptor of how they were produced.

    pattern is "unstructured" (with the removal ratio) or "two_four".
    """

    values: DenseMatrix
    pattern: str = "unstructured"
    ratio: float = 0.0

    def __post_init__(self):
        # Normalize -0.0 to +0.0 so mask logic and bitwise comparisons are
        # insensitive to the sign of zero.
        self.values.data[self.values.data == 0.0] = 0.0
        if self.pattern not in ("unstructured", "two_four"):
            raise ArgumentError(f"unknown sparsity pattern {self.pattern!r}")
        if self.pattern == "two_four" and not two_four_valid(self.values):
            raise ArgumentError("values do not satisfy the 2:4 pattern")

    @property
    def rows(self) -> int:
        return self.values.rows

    @property
    def cols(self) -> int:
        return self.values.cols

    def mask_bool(self) -> np.ndarray:
        return self.values.data != 0.0

    def mask(self) -> DenseMatrix:
        """The 0/1 float mask M = (values != 0)."""
        return DenseMatrix(self.mask_bool().astype(np.float64))

    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.values.data))


def two_four_valid(values: DenseMatrix) -> bool:
    """True when every aligned group of 4 along the input axis has <= 2 nonzeros."""
    if values.cols % 4 != 0:
        return False
    nz = (values.data != 0.0).reshape(values.rows, values.cols // 4, 4)
    return bool((nz.sum(axis=2) <= 2).all())


def _removal_order(scores: np.ndarray) -> np.ndarray:
    """Flat indices sorted by (score asc, row asc, col asc)."""
    rows, cols = scores.shape
    flat = scores.reshape(-1)
    idx = np.arange(flat.size)
    return np.lexsort((idx % cols, idx // cols, flat))


def prune_magnitude(w: DenseMatrix, ratio: float) -> SparseWeight:
    """Remove the floor(ratio * R * C) smallest-|w| entries globally."""
    if not (0.0 <= ratio < 1.0):
        raise ArgumentError(f"prune ratio must be in [0, 1), got {ratio}")
    out = w.data.copy()
    n_remove = int(ratio * out.size)
    if n_remove:
        order = _removal_order(np.abs(out))
        out.reshape(-1)[order[:n_remove]] = 0.0
    return SparseWeight(DenseMatrix(out), pattern="unstructured", ratio=ratio)


def prune_activation_scaled(w: DenseMatrix, calib: CalibrationBatch, ratio: float) -> SparseWeight:
    """Per-row removal of the floor(ratio * C) lowest |w_ij| * ||x_j|| entries.

    x_j is the j-th feature row of the calibration batch, so a feature that is
    always zero drives its whole weight column to the front of the removal
    order in every row.
    """
    if not (0.0 <= ratio < 1.0):
        raise ArgumentError(f"prune ratio must be in [0, 1), got {ratio}")
    if calib.x.rows != w.cols:
        raise ShapeError(
            f"calibration batch has {calib.x.rows} feature rows, weight needs {w.cols}"
        )
    norms = calib.feature_norms()
    scores = np.abs(w.data) * norms[np.newaxis, :]
    out = w.data.copy()
    n_remove = int(ratio * w.cols)
    if n_remove:
        for i in range(w.rows):
            order = np.lexsort((np.arange(w.cols), scores[i]))
            out[i, order[:n_remove]] = 0.0
    return SparseWeight(DenseMatrix(out), pattern="unstructured", ratio=ratio)


def prune_two_four(w: DenseMatrix, score: str = "magnitude",
                   calib: Optional[CalibrationBatch] = None) -> SparseWeight:
    """Keep the top-2 scores in every aligned group of 4 along the input axis."""
    if w.cols % 4 != 0:
        raise ArgumentError(f"2:4 pruning requires cols divisible by 4, got {w.cols}")
    if score == "magnitude":
        scores = np.abs(w.data)
    elif score == "activation":
        if calib is None:
            raise ArgumentError("activation scoring requires a calibration batch")
        if calib.x.rows != w.cols:
            raise ShapeError(
                f"calibration batch has {calib.x.rows} feature rows, weight needs {w.cols}"
            )
        scores = np.abs(w.data) * calib.feature_norms()[np.newaxis, :]
    else:
        raise ArgumentError(f"unknown score {score!r}")
    out = w.data.copy()
    for i in range(w.rows):
        for g in range(w.cols // 4):
            sl = slice(4 * g, 4 * g + 4)
            group = scores[i, sl]
            # Remove the two lowest; ties resolved by smaller index first.
            order = np.lexsort((np.arange(4), group))
            out[i, sl][order[:2]] = 0.0
    return SparseWeight(DenseMatrix(out), pattern="two_four")


def sparsity(sw: SparseWeight) -> float:
    """Fraction of zero entries."""
    total = sw.rows * sw.cols
    return 1.0 - sw.nonzeros() / total
