"""Domain types and the exact vector arithmetic every other module builds on.

All arithmetic is float64. Squared distances are accumulated in ascending
coordinate order (``np.cumsum``) so that a pair's value never depends on
which code path, thread, or batch computed it.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class DimensionError(ValidationError):
    """Vector lengths disagree."""


class ResilienceError(ValidationError):
    """Participant count violates N >= 2f + 3."""


def _as_values(x) -> np.ndarray:
    if isinstance(x, GradientVector):
        return x.values
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GradientVector:
    client_id: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size == 0:
            raise DimensionError(f"gradient must be a non-empty 1-D vector, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValidationError(f"gradient of client {self.client_id} has non-finite entries")
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GradientVector):
            return NotImplemented
        return self.client_id == other.client_id and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class SystemConfig:
    """Static parameters of one aggregation deployment.

    ``select_k`` defaults to ``n_clients - n_byzantine - 2``. ``noise_sigma``
    defaults to the Gaussian scale equivalent to the codebook,
    ``sqrt(C / 2d)``.
    """

    n_clients: int
    n_byzantine: int
    dim: int
    codebook_constant: float = 1.0
    select_k: Optional[int] = None
    noise_sigma: Optional[float] = None
    seed: int = 0
    clip_norm: Optional[float] = None
    reuse_codebook: bool = False
    codebook_batch_rows: int = 64

    def __post_init__(self):
        n, f = self.n_clients, self.n_byzantine
        if f < 0 or n < 1:
            raise ValidationError(f"need n_clients >= 1 and n_byzantine >= 0, got N={n}, f={f}")
        if n < 2 * f + 3:
            raise ResilienceError(f"N >= 2f+3 violated: N={n}, f={f} requires N >= {2 * f + 3}")
        if self.select_k is None:
            object.__setattr__(self, "select_k", n - f - 2)
        if not 1 <= self.select_k <= n - f:
            raise ValidationError(f"select_k must lie in [1, N-f] = [1, {n - f}], got {self.select_k}")
        if self.dim < n:
            raise ValidationError(f"dim must be >= n_clients for an exact codebook (d={self.dim}, N={n})")
        if not (self.codebook_constant > 0 and math.isfinite(self.codebook_constant)):
            raise ValidationError(f"codebook_constant must be positive, got {self.codebook_constant}")
        if self.noise_sigma is not None and not self.noise_sigma > 0:
            raise ValidationError(f"noise_sigma must be positive, got {self.noise_sigma}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValidationError(f"clip_norm must be positive, got {self.clip_norm}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must fit in an unsigned 64-bit integer")
        if self.codebook_batch_rows < 1:
            raise ValidationError("codebook_batch_rows must be >= 1")

    @property
    def sigma(self) -> float:
        if self.noise_sigma is not None:
            return self.noise_sigma
        return math.sqrt(self.codebook_constant / (2 * self.dim))


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric table of squared distances between the clients in ``ids``."""

    ids: tuple
    entries: np.ndarray = field(repr=False)

    SYMMETRY_ATOL = 1e-9
    NEGATIVE_ATOL = 1e-9

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        m = np.asarray(self.entries, dtype=np.float64)
        n = len(ids)
        if m.shape != (n, n):
            raise DimensionError(f"matrix shape {m.shape} does not match {n} ids")
        if len(set(ids)) != n:
            raise ValidationError("duplicate client ids")
        if not np.all(np.isfinite(m)):
            raise ValidationError("distance matrix has non-finite entries")
        scale = max(1.0, float(np.max(np.abs(m)))) if n else 1.0
        if not np.allclose(m, m.T, rtol=0.0, atol=self.SYMMETRY_ATOL * scale):
            raise ValidationError("distance matrix is not symmetric")
        if np.any(np.diag(m) != 0.0):
            raise ValidationError("distance matrix must have a zero diagonal")
        if np.any(m < -self.NEGATIVE_ATOL * scale):
            raise ValidationError("distance matrix has negative entries")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "entries", _frozen(m))

    @property
    def n(self) -> int:
        return len(self.ids)

    def __getitem__(self, pair):
        i, j = pair
        return float(self.entries[self.ids.index(i), self.ids.index(j)])


def _sq_sums(diffs: np.ndarray) -> np.ndarray:
    # cumsum is a strict left-to-right accumulation: the canonical order.
    return np.cumsum(diffs * diffs, axis=-1)[..., -1]


def l2_dist_sq(a, b) -> float:
    """Squared Euclidean distance, accumulated in ascending coordinate order."""
    x, y = _as_values(a), _as_values(b)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.size == 0:
        return 0.0
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("non-finite input")
    return float(_sq_sums(x - y))


def clip_to_norm(g: GradientVector, bound: float) -> GradientVector:
    if not bound > 0:
        raise ValidationError(f"clip bound must be positive, got {bound}")
    norm = float(np.linalg.norm(g.values))
    if norm <= bound:
        return g
    return GradientVector(g.client_id, g.values * (bound / norm))


def thread_count(requested: Optional[int] = None) -> int:
    """Worker-loop parallelism: explicit request, else MASKEDKRUM_THREADS, else 1."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("MASKEDKRUM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"MASKEDKRUM_THREADS must be an integer, got {env!r}") from None
    return 1


def pairwise_sq_dists(vectors: Sequence, threads: Optional[int] = None) -> np.ndarray:
    """N x N squared distances with zero diagonal.

    Pair (i, j), i < j, is always evaluated as ``vectors[i] - vectors[j]``
    with ascending-k summation, so serial and threaded runs agree bit for bit
    and each entry equals ``l2_dist_sq(vectors[i], vectors[j])`` exactly.
    Rows are handed out to threads in contiguous blocks.
    """
    x = np.asarray([_as_values(v) for v in vectors], dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("all vectors must share one dimension")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite input")
    n = x.shape[0]
    out = np.zeros((n, n), dtype=np.float64)

    def fill_rows(rows: range) -> None:
        for i in rows:
            if i + 1 < n:
                row = _sq_sums(x[i] - x[i + 1:])
                out[i, i + 1:] = row
                out[i + 1:, i] = row

    workers = min(thread_count(threads), max(1, n - 1))
    if workers == 1:
        fill_rows(range(n))
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        blocks = [range(bounds[w], bounds[w + 1]) for w in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill_rows, blocks))
    return out
