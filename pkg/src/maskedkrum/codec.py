"""Two-share gradient masking and distance decoding.

Each gradient g is split into ``g + r`` (worker 1) and ``g - r`` (worker 2).
A worker sees only its own share set, so its pairwise distances carry a cross
term ``±2 (g_i - g_j)^T (r_i - r_j)``. Summing the two workers' tables
cancels it, leaving ``2 ||g_i - g_j||^2 + 2 ||r_i - r_j||^2``, which is
``2 * true + 2C`` under a constant-distance codebook.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import DimensionError, DistanceMatrix, GradientVector, ValidationError, pairwise_sq_dists

WORKER_IDS = (1, 2)


@dataclass(frozen=True)
class EncodedSharePair:
    client_id: int
    share_plus: np.ndarray
    share_minus: np.ndarray


@dataclass(frozen=True)
class PartialDistanceMatrix:
    worker_id: int
    matrix: DistanceMatrix

    def __post_init__(self):
        if self.worker_id not in WORKER_IDS:
            raise ValidationError(f"worker id must be 1 or 2, got {self.worker_id}")


def encode_client_gradient(g: GradientVector, r) -> EncodedSharePair:
    mask = np.asarray(r, dtype=np.float64)
    if mask.shape != g.values.shape:
        raise DimensionError(f"gradient has dim {g.dim}, mask has shape {mask.shape}")
    plus = g.values + mask
    minus = g.values - mask
    if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
        raise ValidationError(f"masked shares of client {g.client_id} overflowed")
    plus.setflags(write=False)
    minus.setflags(write=False)
    return EncodedSharePair(g.client_id, plus, minus)


def worker_pairwise_distances(
    shares: Sequence,
    worker_id: int,
    ids: Optional[Sequence[int]] = None,
    threads: Optional[int] = None,
) -> PartialDistanceMatrix:
    """Distances among one worker's share vectors.

    Takes a single share set only; nothing reachable from the arguments
    belongs to the other worker.
    """
    if len(shares) < 2:
        raise ValidationError(f"need at least 2 shares, got {len(shares)}")
    dims = {np.shape(s) for s in shares}
    if len(dims) != 1:
        raise DimensionError(f"shares have differing shapes: {sorted(dims)}")
    if ids is None:
        ids = range(1, len(shares) + 1)
    entries = pairwise_sq_dists(shares, threads=threads)
    return PartialDistanceMatrix(worker_id, DistanceMatrix(tuple(ids), entries))


def decode_distances(
    p1: PartialDistanceMatrix,
    p2: PartialDistanceMatrix,
    constant: float,
    normalize: bool = False,
) -> DistanceMatrix:
    """Sum the two partial tables.

    The raw sum keeps the ``2x + 2C`` form that Multi-Krum consumes. With
    ``normalize=True`` it is mapped back to ``max((sum - 2C) / 2, 0)``.
    """
    if p1.worker_id != 1 or p2.worker_id != 2:
        raise ValidationError(f"expected partials from workers (1, 2), got ({p1.worker_id}, {p2.worker_id})")
    if p1.matrix.ids != p2.matrix.ids:
        raise DimensionError("partial matrices cover different client sets")
    total = p1.matrix.entries + p2.matrix.entries
    if normalize:
        total = np.maximum((total - 2.0 * constant) / 2.0, 0.0)
    np.fill_diagonal(total, 0.0)
    return DistanceMatrix(p1.matrix.ids, total)
